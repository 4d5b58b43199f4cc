//! Joint heatmap-regression keypoint detector and completeness classifier.

use std::io::{Cursor, Read};

use ndarray::{s, Array2, Array4, ArrayD, ArrayView2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{resize, Completeness, KeyPointSet, N_KEYPOINTS};
use crate::nncore::{class_weights, read_sequential, weighted_cross_entropy, write_sequential, Adam, LayerSpec, Sequential};
use crate::{seeds, synthgen, FormError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Side of the square network input.
    pub input_size: usize,
    /// Heatmap side; must be `input_size` or `input_size / 2`.
    pub heatmap_size: usize,
    /// Channel widths of the three resolution levels.
    pub widths: [usize; 3],
    /// Gaussian target spread in heatmap pixels.
    pub sigma: f64,
    /// Append normalized row/column coordinate channels to the input.
    pub coord_channels: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub class_loss_weight: f64,
    /// Extra squared-error weight on target mass, `1 + peak_weight * target`,
    /// so the heatmaps do not settle on all zeros.
    pub peak_weight: f32,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_size: 64,
            heatmap_size: 32,
            widths: [8, 16, 32],
            sigma: 2.0,
            coord_channels: true,
            epochs: 16,
            batch_size: 16,
            learning_rate: 1e-3,
            class_loss_weight: 1.0,
            peak_weight: 10.0,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.input_size;
        if s < 16 || !s.is_multiple_of(4) {
            return Err(FormError::Config(format!("detector input size {s} must be a multiple of 4, >= 16")));
        }
        if self.heatmap_size != s && self.heatmap_size * 2 != s {
            return Err(FormError::Config(format!("heatmap size {} must be {s} or {}", self.heatmap_size, s / 2)));
        }
        if self.widths.contains(&0) || self.epochs == 0 || self.batch_size == 0 || !(self.sigma > 0.0) {
            return Err(FormError::Config("detector widths, epochs, batch size and sigma must be positive".into()));
        }
        Ok(())
    }

    fn in_channels(&self) -> usize {
        if self.coord_channels {
            3
        } else {
            1
        }
    }
}

/// One training image at network input resolution.
#[derive(Debug, Clone)]
pub struct DetectorSample {
    pub image: Array2<f32>,
    /// Keypoints in input pixels; `None` when the heatmaps carry no target.
    pub keypoints: Option<Vec<[f64; 2]>>,
    pub class: Completeness,
}

/// Gaussian bump of height 1 at `center` (row, col) on an `n x n` grid.
pub fn gaussian_heatmap(n: usize, center: [f64; 2], sigma: f64) -> Array2<f32> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    Array2::from_shape_fn((n, n), |(i, j)| {
        let d2 = (i as f64 - center[0]).powi(2) + (j as f64 - center[1]).powi(2);
        (-d2 * inv).exp() as f32
    })
}

/// Argmax, refined by the center of mass of the 5x5 window around it after
/// subtracting the window minimum.
pub fn decode_heatmap(hm: ArrayView2<f32>) -> [f64; 2] {
    let (h, w) = hm.dim();
    let (mut bi, mut bj, mut bv) = (0, 0, f32::NEG_INFINITY);
    for ((i, j), &v) in hm.indexed_iter() {
        if v > bv {
            (bi, bj, bv) = (i, j, v);
        }
    }
    let (i0, i1) = (bi.saturating_sub(2), (bi + 3).min(h));
    let (j0, j1) = (bj.saturating_sub(2), (bj + 3).min(w));
    let win = hm.slice(s![i0..i1, j0..j1]);
    let lo = win.fold(f32::INFINITY, |a, &b| a.min(b));
    let (mut m, mut sr, mut sc) = (0.0f64, 0.0f64, 0.0f64);
    for ((i, j), &v) in win.indexed_iter() {
        let wgt = (v - lo) as f64;
        m += wgt;
        sr += wgt * (i0 + i) as f64;
        sc += wgt * (j0 + j) as f64;
    }
    if m > 0.0 {
        [sr / m, sc / m]
    } else {
        [bi as f64, bj as f64]
    }
}

/// The trained detector: a shared convolutional trunk, a heatmap head and a
/// three-way completeness head.
#[derive(Debug, Clone)]
pub struct KeypointDetector {
    config: DetectorConfig,
    trunk: Sequential<f32>,
    heat: Sequential<f32>,
    class: Sequential<f32>,
}

fn conv(c: usize, k: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv { channels_out: c, kernel: k, stride }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorReport {
    pub epoch_losses: Vec<f64>,
}

impl KeypointDetector {
    pub fn new(config: &DetectorConfig) -> Result<Self> {
        config.validate()?;
        let [w0, w1, w2] = config.widths;
        let s = config.input_size;
        let trunk_specs = [
            conv(w0, 3, 1),
            LayerSpec::ReLU,
            conv(w1, 3, 2),
            LayerSpec::ReLU,
            conv(w1, 3, 1),
            LayerSpec::ReLU,
            conv(w2, 3, 2),
            LayerSpec::ReLU,
            conv(w2, 3, 1),
            LayerSpec::ReLU,
        ];
        let mut heat_specs = vec![LayerSpec::Upsample { factor: 2 }, conv(w1, 3, 1), LayerSpec::ReLU];
        if config.heatmap_size == s {
            heat_specs.extend([LayerSpec::Upsample { factor: 2 }, conv(w0, 3, 1), LayerSpec::ReLU]);
        }
        heat_specs.push(conv(N_KEYPOINTS, 1, 1));
        let class_specs = [conv(w2, 3, 2), LayerSpec::ReLU, LayerSpec::GlobalAveragePool, LayerSpec::FullyConnected { n_out: 3 }, LayerSpec::Softmax];
        let trunk = Sequential::new(&[config.in_channels(), s, s], &trunk_specs, seeds::derive(config.seed, &[1]))?;
        let feat = trunk.output_dims().to_vec();
        let heat = Sequential::new(&feat, &heat_specs, seeds::derive(config.seed, &[2]))?;
        let class = Sequential::new(&feat, &class_specs, seeds::derive(config.seed, &[3]))?;
        Ok(KeypointDetector { config: config.clone(), trunk, heat, class })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn input_tensor(&self, images: &[&Array2<f32>]) -> ArrayD<f32> {
        let s = self.config.input_size;
        let c = self.config.in_channels();
        let mut x = Array4::<f32>::zeros((images.len(), c, s, s));
        for (n, img) in images.iter().enumerate() {
            x.slice_mut(s![n, 0, .., ..]).assign(img);
            if self.config.coord_channels {
                let norm = |i: usize| (i as f32 + 0.5) / s as f32 * 2.0 - 1.0;
                x.slice_mut(s![n, 1, .., ..]).indexed_iter_mut().for_each(|((i, _), v)| *v = norm(i));
                x.slice_mut(s![n, 2, .., ..]).indexed_iter_mut().for_each(|((_, j), v)| *v = norm(j));
            }
        }
        x.into_dyn()
    }

    fn stride(&self) -> f64 {
        (self.config.input_size / self.config.heatmap_size) as f64
    }

    /// Input-pixel coordinates to heatmap coordinates.
    fn to_heatmap(&self, p: [f64; 2]) -> [f64; 2] {
        let st = self.stride();
        [(p[0] + 0.5) / st - 0.5, (p[1] + 0.5) / st - 0.5]
    }

    /// Jointly train heatmaps (squared error against Gaussian targets) and the
    /// completeness head (class-weighted cross-entropy) with Adam.
    pub fn train(samples: &[DetectorSample], config: &DetectorConfig) -> Result<(Self, DetectorReport)> {
        let mut det = KeypointDetector::new(config)?;
        if samples.is_empty() {
            return Err(FormError::Validation("empty detector training set".into()));
        }
        let s = config.input_size;
        if let Some(bad) = samples.iter().find(|x| x.image.dim() != (s, s)) {
            return Err(FormError::DimMismatch { expected: vec![s, s], got: vec![bad.image.nrows(), bad.image.ncols()] });
        }
        let labels: Vec<usize> = samples.iter().map(|x| x.class.index()).collect();
        let cw = class_weights(&labels, 3)?;
        let hs = config.heatmap_size;
        let targets: Vec<Option<Array2<f32>>> = samples
            .iter()
            .map(|x| {
                x.keypoints.as_ref().map(|kps| {
                    let mut t = Array2::<f32>::zeros((N_KEYPOINTS, hs * hs));
                    for (k, &p) in kps.iter().enumerate() {
                        let g = gaussian_heatmap(hs, det.to_heatmap(p), config.sigma);
                        t.row_mut(k).assign(&g.into_shape_with_order(hs * hs).expect("contiguous"));
                    }
                    t
                })
            })
            .collect();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, &[4]));
        let mut adam = Adam::new(config.learning_rate);
        let mut losses = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let imgs: Vec<&Array2<f32>> = chunk.iter().map(|&i| &samples[i].image).collect();
                let x = det.input_tensor(&imgs);
                let n = chunk.len();
                let f = det.trunk.forward(&x, true, &mut rng)?;
                let hm = det.heat.forward(&f, true, &mut rng)?;
                let probs = det
                    .class
                    .forward(&f, true, &mut rng)?
                    .into_dimensionality()
                    .map_err(|e| FormError::Numeric(e.to_string()))?;
                let hm = hm.into_shape_with_order((n, N_KEYPOINTS, hs * hs)).map_err(|e| FormError::Numeric(e.to_string()))?;
                let mut g_hm = ndarray::Array3::<f32>::zeros((n, N_KEYPOINTS, hs * hs));
                let mut heat_loss = 0.0;
                let denom = (n * N_KEYPOINTS) as f32;
                for (b, &i) in chunk.iter().enumerate() {
                    if let Some(t) = &targets[i] {
                        let diff = &hm.index_axis(Axis(0), b) - t;
                        let wgt = t.mapv(|v| 1.0 + config.peak_weight * v);
                        heat_loss += diff.iter().zip(&wgt).map(|(d, w)| (w * d * d) as f64).sum::<f64>() / denom as f64;
                        g_hm.index_axis_mut(Axis(0), b).assign(&(diff * wgt * (2.0 / denom)));
                    }
                }
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let w: Vec<f64> = y.iter().map(|&c| cw[c] * config.class_loss_weight).collect();
                let (class_loss, g_logits) = weighted_cross_entropy(&probs, &y, &w);
                total += (heat_loss + class_loss) * n as f64;
                let g_hm = g_hm.into_shape_with_order(IxDyn(&[n, N_KEYPOINTS, hs, hs])).expect("heatmap dims");
                let g_f = det.heat.backward(g_hm)? + det.class.backward_through(g_logits.into_dyn(), 4)?;
                det.trunk.backward(g_f)?;
                let mut params = det.trunk.params_mut();
                params.extend(det.heat.params_mut());
                params.extend(det.class.params_mut());
                adam.step(params);
            }
            losses.push(total / samples.len() as f64);
            log::debug!("detector epoch loss {:.5}", losses.last().unwrap());
        }
        Ok((det, DetectorReport { epoch_losses: losses }))
    }

    /// Detect keypoints and classify completeness on full-resolution halves.
    /// Coordinates are returned in each half's own pixel frame.
    pub fn detect_batch(&self, halves: &[&Array2<f32>]) -> Result<Vec<KeyPointSet>> {
        if halves.is_empty() {
            return Ok(Vec::new());
        }
        let s = self.config.input_size;
        let resized: Vec<Array2<f32>> = halves.iter().map(|h| resize(h, (s, s))).collect();
        let refs: Vec<&Array2<f32>> = resized.iter().collect();
        let x = self.input_tensor(&refs);
        let mut trunk = self.trunk.clone();
        let mut heat = self.heat.clone();
        let mut class = self.class.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = trunk.forward(&x, false, &mut rng)?;
        let hm = heat.forward(&f, false, &mut rng)?;
        let probs = class.forward(&f, false, &mut rng)?;
        let st = self.stride();
        Ok(halves
            .iter()
            .enumerate()
            .map(|(n, half)| {
                let (h, w) = half.dim();
                let (sr, sc) = (h as f64 / s as f64, w as f64 / s as f64);
                let points = (0..N_KEYPOINTS)
                    .map(|k| {
                        let p = decode_heatmap(hm.slice(s![n, k, .., ..]).into_dimensionality().expect("2-D map"));
                        let inp = [(p[0] + 0.5) * st - 0.5, (p[1] + 0.5) * st - 0.5];
                        [(inp[0] + 0.5) * sr - 0.5, (inp[1] + 0.5) * sc - 0.5]
                    })
                    .collect();
                let pr: Vec<f64> = (0..3).map(|c| probs[[n, c]] as f64).collect();
                let best = (0..3).max_by(|&a, &b| pr[a].total_cmp(&pr[b])).expect("three classes");
                KeyPointSet {
                    points,
                    completeness: Completeness::ALL[best],
                    confidence: pr[best],
                    complete_probability: pr[Completeness::Complete.index()],
                }
            })
            .collect())
    }

    pub fn detect(&self, half: &Array2<f32>) -> Result<KeyPointSet> {
        Ok(self.detect_batch(&[half])?.remove(0))
    }

    /// Detect on many halves, in parallel chunks.
    pub fn detect_all(&self, halves: &[&Array2<f32>]) -> Result<Vec<KeyPointSet>> {
        let chunks: Vec<Result<Vec<KeyPointSet>>> = halves.par_chunks(32).map(|c| self.detect_batch(c)).collect();
        let mut out = Vec::with_capacity(halves.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = serde_json::to_vec(&self.config)?;
        let mut out = b"FKPD\x01".to_vec();
        for blob in [cfg, write_sequential(&self.trunk), write_sequential(&self.heat), write_sequential(&self.class)] {
            out.extend((blob.len() as u64).to_le_bytes());
            out.extend(blob);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..5] != b"FKPD\x01" {
            return Err(FormError::Format("not a keypoint detector file".into()));
        }
        let mut cur = Cursor::new(&bytes[5..]);
        let mut next = || -> Result<Vec<u8>> {
            let mut len = [0u8; 8];
            cur.read_exact(&mut len).map_err(|_| FormError::Format("truncated detector file".into()))?;
            let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
            cur.read_exact(&mut buf).map_err(|_| FormError::Format("truncated detector file".into()))?;
            Ok(buf)
        };
        let config: DetectorConfig = serde_json::from_slice(&next()?)?;
        let trunk = read_sequential(&next()?)?;
        let heat = read_sequential(&next()?)?;
        let class = read_sequential(&next()?)?;
        let fresh = KeypointDetector::new(&config)?;
        if trunk.specs() != fresh.trunk.specs() || heat.specs() != fresh.heat.specs() || class.specs() != fresh.class.specs()
        {
            return Err(FormError::Format("detector layers do not match its configuration".into()));
        }
        Ok(KeypointDetector { config, trunk, heat, class })
    }
}

/// Composition of a synthetic detector training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainingMix {
    pub n_xray: usize,
    /// CT studies; each yields two halves under both CT and CTN scaling.
    pub n_ct: usize,
    pub n_noise: usize,
    pub implant_fraction: f64,
    pub incomplete_fraction: f64,
    pub xray_half: (usize, usize),
    pub ct_dims: (usize, usize, usize),
    pub seed: u64,
}

impl Default for DetectorTrainingMix {
    fn default() -> Self {
        DetectorTrainingMix {
            n_xray: 800,
            n_ct: 100,
            n_noise: 100,
            implant_fraction: 0.15,
            incomplete_fraction: 0.15,
            xray_half: (224, 224),
            ct_dims: (32, 64, 128),
            seed: 0,
        }
    }
}

impl DetectorTrainingMix {
    fn draw_class(&self, u: f64) -> Completeness {
        if u < self.implant_fraction {
            Completeness::Implant
        } else if u < self.implant_fraction + self.incomplete_fraction {
            Completeness::Incomplete
        } else {
            Completeness::Complete
        }
    }

    /// Render the set at detector input resolution `size`.
    pub fn generate(&self, size: usize) -> Result<Vec<DetectorSample>> {
        let to_input = |kps: &[[f64; 2]], h: usize, w: usize| -> Vec<[f64; 2]> {
            let (sr, sc) = (size as f64 / h as f64, size as f64 / w as f64);
            kps.iter().map(|p| [(p[0] + 0.5) * sr - 0.5, (p[1] + 0.5) * sc - 0.5]).collect()
        };
        let target = |kps: Vec<[f64; 2]>, class: Completeness| (class != Completeness::Incomplete).then_some(kps);
        let xray: Vec<DetectorSample> = (0..self.n_xray)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, &[10, i as u64]));
                let q = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
                let class = self.draw_class(rng.gen());
                let (img, kps) = synthgen::render_training_half(q, class, self.xray_half, rng.gen());
                let kps = to_input(&kps, self.xray_half.0, self.xray_half.1);
                DetectorSample { image: resize(&img, (size, size)), keypoints: target(kps, class), class }
            })
            .collect();
        let ct: Vec<Vec<DetectorSample>> = (0..self.n_ct)
            .into_par_iter()
            .map(|i| -> Result<Vec<DetectorSample>> {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, &[11, i as u64]));
                let q = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
                let classes = [self.draw_class(rng.gen()), self.draw_class(rng.gen())];
                let study = synthgen::render_training_ct(q, classes, self.ct_dims, rng.gen());
                let mut out = Vec::with_capacity(4);
                for route in [super::Route::Ct, super::Route::Ctn] {
                    let prep = super::prepare_study(&study.study, route, &super::PhantomConfig::default())?;
                    for (n, (_, half)) in prep.halves.iter().enumerate() {
                        let (h, w) = half.dim();
                        let kps = to_input(&study.keypoints[n], h, w);
                        out.push(DetectorSample {
                            image: resize(half, (size, size)),
                            keypoints: target(kps, classes[n]),
                            class: classes[n],
                        });
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let noise = (0..self.n_noise).map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, &[12, i as u64]));
            let spread: f32 = rng.gen_range(0.02..1.0);
            let level: f32 = rng.gen_range(0.0..=1.0 - spread);
            let image = Array2::from_shape_fn((size, size), |_| (level + spread * rng.gen::<f32>()).clamp(0.0, 1.0));
            DetectorSample { image, keypoints: None, class: Completeness::Incomplete }
        });
        Ok(xray.into_iter().chain(ct.into_iter().flatten()).chain(noise).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_recovers_subpixel_gaussian_center() {
        for c in [[10.0, 12.0], [10.3, 12.4], [20.7, 5.5]] {
            let hm = gaussian_heatmap(32, c, 2.0);
            let p = decode_heatmap(hm.view());
            assert!((p[0] - c[0]).abs() < 0.2 && (p[1] - c[1]).abs() < 0.2, "{p:?} vs {c:?}");
        }
    }

    #[test]
    fn decode_at_border_stays_in_bounds() {
        let p = decode_heatmap(gaussian_heatmap(16, [0.0, 15.0], 2.0).view());
        assert!(p[0] >= 0.0 && p[1] <= 15.0);
    }

    #[test]
    fn untrained_detector_roundtrips_and_outputs_probabilities() {
        let cfg = DetectorConfig { input_size: 16, heatmap_size: 8, widths: [2, 2, 2], ..Default::default() };
        let det = KeypointDetector::new(&cfg).unwrap();
        let img = Array2::from_elem((40, 40), 0.3f32);
        let k = det.detect(&img).unwrap();
        assert_eq!(k.points.len(), N_KEYPOINTS);
        assert!(k.confidence > 0.0 && k.confidence <= 1.0);
        let back = KeypointDetector::from_bytes(&det.to_bytes().unwrap()).unwrap();
        assert_eq!(back.detect(&img).unwrap(), k);
        assert!(KeypointDetector::new(&DetectorConfig { heatmap_size: 5, ..cfg }).is_err());
    }
}
