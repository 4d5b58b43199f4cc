//! Versioned model container: `b"FNET"`, version, input dims, layer specs,
//! then every parameter as a 2-D FGRID record, then a SHA-256 footer over all
//! preceding bytes.

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use super::{LayerSpec, Sequential};
use crate::fgrid;
use crate::{FormError, Result};

const MAGIC: &[u8; 4] = b"FNET";
const VERSION: u8 = 1;

pub fn write_sequential(net: &Sequential<f32>) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.push(VERSION);
    b.push(net.input_dims().len() as u8);
    for &d in net.input_dims() {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    b.extend_from_slice(&(net.specs().len() as u32).to_le_bytes());
    for spec in net.specs() {
        match *spec {
            LayerSpec::Conv { channels_out, kernel, stride } => {
                b.push(1);
                for v in [channels_out, kernel, stride] {
                    b.extend_from_slice(&(v as u32).to_le_bytes());
                }
            }
            LayerSpec::FullyConnected { n_out } => {
                b.push(2);
                b.extend_from_slice(&(n_out as u32).to_le_bytes());
            }
            LayerSpec::ReLU => b.push(3),
            LayerSpec::Dropout { rate } => {
                b.push(4);
                b.extend_from_slice(&rate.to_le_bytes());
            }
            LayerSpec::GlobalAveragePool => b.push(5),
            LayerSpec::Softmax => b.push(6),
            LayerSpec::Upsample { factor } => {
                b.push(7);
                b.extend_from_slice(&(factor as u32).to_le_bytes());
            }
        }
    }
    let params = net.params();
    b.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let dims = as_2d(p.dims());
        fgrid::write_array(&mut b, &dims, p.value.iter().copied()).expect("in-memory write");
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    b
}

fn as_2d(dims: &[usize]) -> Vec<usize> {
    match dims {
        [n] => vec![1, *n],
        [a, b] => vec![*a, *b],
        other => vec![other[0], other[1..].iter().product()],
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(FormError::Format("truncated model file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn read_sequential(bytes: &[u8]) -> Result<Sequential<f32>> {
    if bytes.len() < 32 + 6 {
        return Err(FormError::Format("model file too short".into()));
    }
    let (body, footer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != footer {
        return Err(FormError::Format("model checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body };
    if c.take(4)? != MAGIC {
        return Err(FormError::Format("bad model magic".into()));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(FormError::Format(format!("unsupported model version {version}")));
    }
    let ndim = c.u8()? as usize;
    let input: Vec<usize> = (0..ndim).map(|_| c.u32()).collect::<Result<_>>()?;
    let n_layers = c.u32()?;
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        specs.push(match c.u8()? {
            1 => LayerSpec::Conv { channels_out: c.u32()?, kernel: c.u32()?, stride: c.u32()? },
            2 => LayerSpec::FullyConnected { n_out: c.u32()? },
            3 => LayerSpec::ReLU,
            4 => LayerSpec::Dropout { rate: c.f64()? },
            5 => LayerSpec::GlobalAveragePool,
            6 => LayerSpec::Softmax,
            7 => LayerSpec::Upsample { factor: c.u32()? },
            t => return Err(FormError::Format(format!("unknown layer tag {t}"))),
        });
    }
    let mut net = Sequential::<f32>::new(&input, &specs, 0)?;
    let n_params = c.u32()?;
    let mut params = net.params_mut();
    if n_params != params.len() {
        return Err(FormError::Format(format!("expected {} parameter tensors, found {n_params}", params.len())));
    }
    for p in params.iter_mut() {
        let grid = fgrid::read_array(&mut c.buf)?;
        if grid.len() != p.value.len() {
            return Err(FormError::Format("parameter size mismatch".into()));
        }
        let shape = p.dims().to_vec();
        p.value = ArrayD::from_shape_vec(IxDyn(&shape), grid.into_iter().collect()).expect("sized");
    }
    if !c.buf.is_empty() {
        return Err(FormError::Format("trailing bytes in model file".into()));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_round_trip_and_checksum() {
        let specs = [
            LayerSpec::Conv { channels_out: 3, kernel: 3, stride: 2 },
            LayerSpec::ReLU,
            LayerSpec::Upsample { factor: 2 },
            LayerSpec::GlobalAveragePool,
            LayerSpec::FullyConnected { n_out: 4 },
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::FullyConnected { n_out: 2 },
            LayerSpec::Softmax,
        ];
        let net = Sequential::<f32>::new(&[1, 8, 8], &specs, 11).unwrap();
        let bytes = write_sequential(&net);
        let back = read_sequential(&bytes).unwrap();
        assert_eq!(back.specs(), net.specs());
        for (a, b) in back.params().iter().zip(net.params()) {
            assert_eq!(a.value, b.value);
        }
        let mut corrupt = bytes.clone();
        corrupt[20] ^= 1;
        assert!(read_sequential(&corrupt).is_err());
    }
}
