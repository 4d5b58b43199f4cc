//! Image classifier trained on cropped femur images; its global-average-pool
//! activations are exported as per-half image features.

use std::io::{Read, Write};

use ndarray::{s, Array2, Array4, ArrayD, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nncore::{self, Dataset, LayerSpec, Sequential, TrainConfig, TrainReport};
use crate::preprocess::{flip_horizontal, resample_window, Side};
use crate::{fgrid, seeds, FormError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub input_dims: (usize, usize),
    /// Channels of the first block; each further block doubles them.
    pub backbone_channels: usize,
    /// Number of stride-2 conv blocks; the last one emits `feature_dim`.
    pub blocks: usize,
    /// GAP feature width `D`.
    pub feature_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub augment: bool,
    pub train: TrainConfig,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            input_dims: (96, 96),
            backbone_channels: 16,
            blocks: 4,
            feature_dim: 2048,
            hidden: 128,
            dropout: 0.5,
            augment: true,
            train: TrainConfig::default(),
        }
    }
}

impl ExtractorConfig {
    pub fn specs(&self) -> Result<Vec<LayerSpec>> {
        if self.blocks == 0 || self.backbone_channels == 0 || self.feature_dim == 0 || self.hidden == 0 {
            return Err(FormError::Config("extractor blocks, channels, feature_dim and hidden must be positive".into()));
        }
        let (h, w) = self.input_dims;
        if h >> self.blocks == 0 || w >> self.blocks == 0 {
            return Err(FormError::Config(format!("{} stride-2 blocks collapse input {:?}", self.blocks, self.input_dims)));
        }
        let mut specs = Vec::new();
        for b in 0..self.blocks {
            let c = if b + 1 == self.blocks { self.feature_dim } else { self.backbone_channels << b };
            specs.push(LayerSpec::Conv { channels_out: c, kernel: 3, stride: 2 });
            specs.push(LayerSpec::ReLU);
        }
        specs.extend([
            LayerSpec::GlobalAveragePool,
            LayerSpec::FullyConnected { n_out: self.hidden },
            LayerSpec::Dropout { rate: self.dropout },
            LayerSpec::FullyConnected { n_out: 2 },
            LayerSpec::Softmax,
        ]);
        Ok(specs)
    }
}

/// The classifier plus the index of its pooling layer.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub net: Sequential<f32>,
    gap_index: usize,
    trained: bool,
}

pub fn build_extractor(cfg: &ExtractorConfig) -> Result<Extractor> {
    let specs = cfg.specs()?;
    let gap_index = specs.iter().position(|s| *s == LayerSpec::GlobalAveragePool).expect("pool layer");
    let net = Sequential::new(&[1, cfg.input_dims.0, cfg.input_dims.1], &specs, seeds::derive(cfg.train.seed, &[0xE]))?;
    Ok(Extractor { net, gap_index, trained: false })
}

impl Extractor {
    pub fn feature_dim(&self) -> usize {
        match self.net.specs()[self.gap_index - 2] {
            LayerSpec::Conv { channels_out, .. } => channels_out,
            _ => unreachable!("pool follows conv + ReLU"),
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Mark externally loaded weights as usable.
    pub fn from_trained(net: Sequential<f32>) -> Result<Self> {
        let gap_index = net
            .specs()
            .iter()
            .position(|s| *s == LayerSpec::GlobalAveragePool)
            .ok_or_else(|| FormError::Config("network has no global average pool".into()))?;
        if gap_index < 2 || !net.ends_in_softmax() {
            return Err(FormError::Config("not an extractor network".into()));
        }
        Ok(Extractor { net, gap_index, trained: true })
    }

    /// Positive-class probabilities in eval mode.
    pub fn predict(&self, images: &[Array2<f32>]) -> Result<Vec<f64>> {
        self.ensure_trained()?;
        let mut net = self.net.clone();
        let data = CropDataset { images: images.to_vec(), labels: vec![0; images.len()] };
        nncore::predict_positive(&mut net, &data, 64)
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(FormError::Untrained)
        }
    }
}

/// One augmentation draw; `AugmentParams::IDENTITY` leaves images unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub zoom: f64,
    pub scale: f32,
    pub shift: f32,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { flip: false, zoom: 1.0, scale: 1.0, shift: 0.0 };

    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        AugmentParams {
            flip: rng.gen_bool(0.5),
            zoom: rng.gen_range(0.9..=1.1),
            scale: rng.gen_range(0.9..=1.1),
            shift: rng.gen_range(-0.05..=0.05),
        }
    }

    /// Flip, central zoom (factor > 1 magnifies), then intensity
    /// `scale * v + shift` clamped to `[0, 1]`.
    pub fn apply(&self, image: &Array2<f32>) -> Array2<f32> {
        let mut out = if self.flip { flip_horizontal(image) } else { image.clone() };
        if self.zoom != 1.0 {
            let (h, w) = out.dim();
            let (ch, cw) = (h as f64 / 2.0, w as f64 / 2.0);
            let (hh, hw) = (ch / self.zoom, cw / self.zoom);
            out = resample_window(out.view(), [ch - hh, ch + hh, cw - hw, cw + hw], (h, w));
        }
        if self.scale != 1.0 || self.shift != 0.0 {
            out.mapv_inplace(|v| (v * self.scale + self.shift).clamp(0.0, 1.0));
        }
        out
    }
}

pub fn augment(image: &Array2<f32>, seed: u64) -> Array2<f32> {
    AugmentParams::draw(&mut ChaCha8Rng::seed_from_u64(seed)).apply(image)
}

/// Cropped images with binary labels (1 = fracture within the horizon).
#[derive(Debug, Clone, Default)]
pub struct CropDataset {
    pub images: Vec<Array2<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset for CropDataset {
    type Batch = ArrayD<f32>;

    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn batch(&self, idx: &[usize], mut augment: Option<&mut ChaCha8Rng>) -> ArrayD<f32> {
        let (h, w) = self.images[idx[0]].dim();
        let mut x = Array4::<f32>::zeros((idx.len(), 1, h, w));
        for (n, &i) in idx.iter().enumerate() {
            let img = match augment.as_deref_mut() {
                Some(rng) => AugmentParams::draw(rng).apply(&self.images[i]),
                None => self.images[i].clone(),
            };
            x.slice_mut(s![n, 0, .., ..]).assign(&img);
        }
        x.into_dyn()
    }
}

/// Train with class weighting and (optionally) augmentation; the weights of
/// the epoch with the best validation AUC are kept.
pub fn train_extractor(train: &CropDataset, val: &CropDataset, cfg: &ExtractorConfig) -> Result<(Extractor, TrainReport)> {
    if let Some(img) = train.images.iter().chain(&val.images).find(|i| i.dim() != cfg.input_dims) {
        return Err(FormError::DimMismatch {
            expected: vec![cfg.input_dims.0, cfg.input_dims.1],
            got: vec![img.nrows(), img.ncols()],
        });
    }
    let mut ex = build_extractor(cfg)?;
    let tcfg = TrainConfig { augment: cfg.augment, ..cfg.train.clone() };
    let val = (!val.is_empty()).then_some(val);
    let report = nncore::train(&mut ex.net, train, val, &tcfg)?;
    ex.trained = true;
    Ok((ex, report))
}

/// GAP activations (eval mode, no randomness consumed), one row per image.
pub fn extract_gap_features(ex: &Extractor, images: &[Array2<f32>]) -> Result<Array2<f32>> {
    ex.ensure_trained()?;
    let d = ex.feature_dim();
    let mut out = Array2::<f32>::zeros((images.len(), d));
    let mut net = ex.net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = CropDataset { images: images.to_vec(), labels: vec![0; images.len()] };
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(64) {
        let x = data.batch(chunk, None);
        let f = net.forward_range(&x, 0..ex.gap_index + 1, false, &mut rng)?;
        let f = f.into_dimensionality::<Ix2>().map_err(|e| FormError::Numeric(e.to_string()))?;
        out.slice_mut(s![chunk[0]..chunk[0] + chunk.len(), ..]).assign(&f);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub patient_id: String,
    pub side: Side,
    pub values: Vec<f32>,
}

/// CSV feature store: `patient_id, side, f_0 .. f_{D-1}`.
pub fn write_features_csv<W: Write>(w: W, rows: &[FeatureVector]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.values.len());
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["patient_id".to_string(), "side".to_string()];
    header.extend((0..d).map(|i| format!("f_{i}")));
    wr.write_record(&header)?;
    for r in rows {
        if r.values.len() != d {
            return Err(FormError::DimMismatch { expected: vec![d], got: vec![r.values.len()] });
        }
        let mut rec = vec![r.patient_id.clone(), r.side.as_str().to_string()];
        // `{}` on f32 prints the shortest string that round-trips exactly
        rec.extend(r.values.iter().map(|v| format!("{v}")));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_features_csv<R: Read>(r: R) -> Result<Vec<FeatureVector>> {
    let mut rd = csv::Reader::from_reader(r);
    let d = rd.headers()?.len().saturating_sub(2);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f32>().map_err(|e| FormError::Format(format!("feature value `{v}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != d {
            return Err(FormError::Format(format!("row has {} features, header has {d}", values.len())));
        }
        out.push(FeatureVector { patient_id: rec[0].to_string(), side: rec[1].parse()?, values });
    }
    Ok(out)
}

/// Binary feature store: per row a u32 id length, the UTF-8 id, a side byte
/// (0 right, 1 left) and the values as a `1 x D` FGRID grid.
pub fn write_features_bin<W: Write>(mut w: W, rows: &[FeatureVector]) -> Result<()> {
    for r in rows {
        w.write_all(&(r.patient_id.len() as u32).to_le_bytes())?;
        w.write_all(r.patient_id.as_bytes())?;
        w.write_all(&[matches!(r.side, Side::Left) as u8])?;
        fgrid::write_array(&mut w, &[1, r.values.len()], r.values.iter().copied())?;
    }
    Ok(())
}

pub fn read_features_bin<R: Read>(mut r: R) -> Result<Vec<FeatureVector>> {
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut id)?;
        let mut side = [0u8; 1];
        r.read_exact(&mut side)?;
        let grid = fgrid::read_array(&mut r)?;
        out.push(FeatureVector {
            patient_id: String::from_utf8(id).map_err(|e| FormError::Format(e.to_string()))?,
            side: if side[0] == 0 { Side::Right } else { Side::Left },
            values: grid.iter().copied().collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExtractorConfig {
        ExtractorConfig {
            input_dims: (16, 16),
            backbone_channels: 2,
            blocks: 2,
            feature_dim: 8,
            hidden: 4,
            train: TrainConfig { epochs: 2, batch_size: 4, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn gap_width_and_head_output() {
        let cfg = ExtractorConfig { input_dims: (96, 96), backbone_channels: 4, feature_dim: 256, ..Default::default() };
        let ex = build_extractor(&cfg).unwrap();
        assert_eq!(ex.feature_dim(), 256);
        assert_eq!(ex.net.output_dims(), &[2]);
        let paper = ExtractorConfig { backbone_channels: 2, ..Default::default() };
        assert_eq!(build_extractor(&paper).unwrap().feature_dim(), 2048);
    }

    #[test]
    fn untrained_extractor_refuses_features() {
        let ex = build_extractor(&small_cfg()).unwrap();
        assert!(matches!(extract_gap_features(&ex, &[Array2::zeros((16, 16))]), Err(FormError::Untrained)));
    }

    #[test]
    fn identity_augmentation() {
        let img = Array2::from_shape_fn((8, 8), |(i, j)| (i * 8 + j) as f32 / 64.0);
        assert_eq!(AugmentParams::IDENTITY.apply(&img), img);
        let f = AugmentParams { flip: true, ..AugmentParams::IDENTITY };
        assert_eq!(f.apply(&f.apply(&img)), img);
    }

    #[test]
    fn features_are_deterministic_and_constant_for_zero_images() {
        let imgs: Vec<Array2<f32>> =
            (0..8).map(|i| Array2::from_shape_fn((16, 16), |(r, c)| ((r * c + i) % 5) as f32 / 5.0)).collect();
        let train = CropDataset { images: imgs.clone(), labels: vec![0, 1, 0, 1, 0, 1, 0, 1] };
        let (ex, _) = train_extractor(&train, &train, &small_cfg()).unwrap();
        let a = extract_gap_features(&ex, &imgs).unwrap();
        assert_eq!(a, extract_gap_features(&ex, &imgs).unwrap());
        assert_eq!(a.ncols(), 8);
        let z = extract_gap_features(&ex, &[Array2::zeros((16, 16)), Array2::zeros((16, 16))]).unwrap();
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn single_class_training_is_rejected() {
        let train = CropDataset { images: vec![Array2::zeros((16, 16)); 4], labels: vec![0; 4] };
        assert!(matches!(train_extractor(&train, &train, &small_cfg()), Err(FormError::EmptyClass(1))));
    }

    #[test]
    fn feature_store_round_trips() {
        let rows = vec![
            FeatureVector { patient_id: "P1".into(), side: Side::Right, values: vec![0.1, 1.0 / 3.0, -2.5e-7] },
            FeatureVector { patient_id: "P1".into(), side: Side::Left, values: vec![0.0, 7.0, f32::MIN_POSITIVE] },
        ];
        let mut csv = Vec::new();
        write_features_csv(&mut csv, &rows).unwrap();
        assert_eq!(read_features_csv(csv.as_slice()).unwrap(), rows);
        let mut bin = Vec::new();
        write_features_bin(&mut bin, &rows).unwrap();
        assert_eq!(read_features_bin(bin.as_slice()).unwrap(), rows);
    }
}
