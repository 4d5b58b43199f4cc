//! Hough line search for the calibration phantom beneath the patient.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::{FormError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Minimum intensity step (scanner units) for an edge pixel.
    pub edge_threshold: f32,
    /// The brighter side of an edge must exceed this; soft tissue does not.
    pub dense_level: f32,
    /// Votes needed for a line, as a fraction of the image width.
    pub min_votes_fraction: f64,
    /// Largest accepted deviation from horizontal, in degrees.
    pub max_tilt_degrees: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig { edge_threshold: 500.0, dense_level: 1300.0, min_votes_fraction: 0.25, max_tilt_degrees: 5.0 }
    }
}

/// Line accumulator over `theta` in `[0, pi)` (one bin per degree) and
/// `rho = col cos(theta) + row sin(theta)` in unit bins, offset so that
/// negative distances fit. Returns `(accumulator, rho_offset)`.
pub fn hough_lines(edges: &Array2<bool>) -> (Array2<u32>, usize) {
    let (h, w) = edges.dim();
    let diag = ((h * h + w * w) as f64).sqrt().ceil() as usize;
    let mut acc = Array2::<u32>::zeros((180, 2 * diag + 1));
    let trig: Vec<(f64, f64)> = (0..180).map(|t| (t as f64).to_radians().sin_cos()).collect();
    for ((r, c), &e) in edges.indexed_iter() {
        if !e {
            continue;
        }
        for (t, &(sin, cos)) in trig.iter().enumerate() {
            let rho = (c as f64 * cos + r as f64 * sin).round() as isize + diag as isize;
            acc[[t, rho as usize]] += 1;
        }
    }
    (acc, diag)
}

/// First depth row of the phantom/table complex: every row at or after it is
/// discarded. Edges are rising steps into dense material on the mean axial
/// projection (depth x width); the topmost near-horizontal Hough line wins.
pub fn detect_phantom_crop(volume: &Array3<f32>, cfg: &PhantomConfig) -> Result<usize> {
    let (d, h, w) = volume.dim();
    if d < 2 || h == 0 || w == 0 {
        return Err(FormError::NoPhantomFound);
    }
    let proj = volume.mean_axis(Axis(1)).expect("nonempty height");
    let mut edges = Array2::from_elem((d, w), false);
    for k in 1..d {
        for j in 0..w {
            let below = proj[[k, j]];
            edges[[k, j]] = below - proj[[k - 1, j]] > cfg.edge_threshold && below > cfg.dense_level;
        }
    }
    let (acc, offset) = hough_lines(&edges);
    let min_votes = (cfg.min_votes_fraction * w as f64).ceil().max(2.0) as u32;
    let tilt = cfg.max_tilt_degrees.round() as usize;
    let center = (w as f64 - 1.0) / 2.0;
    let mut best: Option<f64> = None;
    for t in 90 - tilt.min(89)..=90 + tilt.min(89) {
        let (sin, cos) = (t as f64).to_radians().sin_cos();
        for (bin, &votes) in acc.row(t).iter().enumerate() {
            if votes < min_votes {
                continue;
            }
            let rho = bin as f64 - offset as f64;
            let row = (rho - center * cos) / sin;
            if best.is_none_or(|b| row < b) {
                best = Some(row);
            }
        }
    }
    match best {
        Some(row) => Ok((row.round().max(0.0) as usize).min(d)),
        None => Err(FormError::NoPhantomFound),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizontal_segment_votes_at_ninety_degrees() {
        let mut e = Array2::from_elem((10, 20), false);
        for j in 2..18 {
            e[[6, j]] = true;
        }
        let (acc, off) = hough_lines(&e);
        assert_eq!(acc.iter().max(), Some(&16));
        assert_eq!(acc[[90, off + 6]], 16);
        assert!(acc[[0, off + 6]] <= 1);
    }

    #[test]
    fn uniform_volume_has_no_phantom() {
        let vol = Array3::from_elem((32, 8, 40), 1000.0f32);
        assert!(matches!(detect_phantom_crop(&vol, &PhantomConfig::default()), Err(FormError::NoPhantomFound)));
    }

    #[test]
    fn finds_top_of_dense_band() {
        let mut vol = Array3::from_elem((32, 8, 40), 0.0f32);
        vol.slice_mut(ndarray::s![5..20, .., 5..35]).fill(1000.0);
        vol.slice_mut(ndarray::s![24..27, .., 10..30]).fill(3000.0);
        vol.slice_mut(ndarray::s![28..30, .., ..]).fill(1600.0);
        assert_eq!(detect_phantom_crop(&vol, &PhantomConfig::default()).unwrap(), 24);
    }
}
