//! FGRID: the little-endian binary grid container shared by the image
//! pipeline, the feature store and model serialization.
//!
//! Layout: `b"FGRD"`, version byte `0x01`, ndim byte (2 or 3), `ndim` u32
//! dims, then `prod(dims)` f32 values in row-major order.

use std::io::{Read, Write};

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{FormError, Result};

pub const MAGIC: &[u8; 4] = b"FGRD";
pub const VERSION: u8 = 0x01;

pub fn write_array<W: Write>(w: &mut W, dims: &[usize], values: impl Iterator<Item = f32>) -> Result<()> {
    if dims.len() != 2 && dims.len() != 3 {
        return Err(FormError::Format(format!("FGRID supports ndim 2 or 3, got {}", dims.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dims.len() as u8])?;
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| FormError::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let expected: usize = dims.iter().product();
    let mut written = 0usize;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
        written += 1;
    }
    if written != expected {
        return Err(FormError::Format(format!("FGRID value count {written} != dims product {expected}")));
    }
    Ok(())
}

pub fn read_array<R: Read>(r: &mut R) -> Result<ArrayD<f32>> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(FormError::Format("bad FGRID magic".into()));
    }
    if head[4] != VERSION {
        return Err(FormError::Format(format!("unsupported FGRID version {}", head[4])));
    }
    let ndim = head[5] as usize;
    if ndim != 2 && ndim != 3 {
        return Err(FormError::Format(format!("FGRID ndim must be 2 or 3, got {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = dims.iter().product();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| FormError::Format(e.to_string()))
}

pub fn encode_2d(grid: &Array2<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(14 + grid.len() * 4);
    write_array(&mut buf, grid.shape(), grid.iter().copied()).expect("in-memory write");
    buf
}

pub fn encode_3d(grid: &Array3<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(18 + grid.len() * 4);
    write_array(&mut buf, grid.shape(), grid.iter().copied()).expect("in-memory write");
    buf
}

pub fn decode_2d(mut bytes: &[u8]) -> Result<Array2<f32>> {
    read_array(&mut bytes)?
        .into_dimensionality()
        .map_err(|_| FormError::Format("expected a 2-D FGRID".into()))
}

pub fn decode_3d(mut bytes: &[u8]) -> Result<Array3<f32>> {
    read_array(&mut bytes)?
        .into_dimensionality()
        .map_err(|_| FormError::Format("expected a 3-D FGRID".into()))
}

pub fn save_2d(path: &std::path::Path, grid: &Array2<f32>) -> Result<()> {
    std::fs::write(path, encode_2d(grid))?;
    Ok(())
}

pub fn save_3d(path: &std::path::Path, grid: &Array3<f32>) -> Result<()> {
    std::fs::write(path, encode_3d(grid))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<ArrayD<f32>> {
    let bytes = std::fs::read(path)?;
    read_array(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_layout_is_bit_exact() {
        let g = array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let b = encode_2d(&g);
        assert_eq!(&b[..4], b"FGRD");
        assert_eq!(b[4], 0x01);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &3u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(&b[b.len() - 4..], &6.0f32.to_le_bytes());
        assert_eq!(b.len(), 14 + 6 * 4);
        assert_eq!(decode_2d(&b).unwrap(), g);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let g = Array3::<f32>::zeros((2, 2, 2));
        let mut b = encode_3d(&g);
        assert_eq!(b[5], 3);
        assert!(decode_3d(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode_3d(&b).is_err());
    }
}
