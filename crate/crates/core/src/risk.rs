//! Fusion MLP estimating fracture risk from image features, risk factors or
//! both.

use std::io::Write;

use ndarray::{concatenate, s, Array2, ArrayD, Axis, Ix2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::RfGroup;
use crate::nncore::{self, Classifier, Dataset, LayerSpec, Sequential, Tensor, TrainConfig, TrainReport};
use crate::{seeds, FormError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskInputs {
    Image,
    Rf,
    Both,
}

impl RiskInputs {
    pub fn uses_image(self) -> bool {
        self != RiskInputs::Rf
    }

    pub fn uses_rf(self) -> bool {
        self != RiskInputs::Image
    }
}

impl std::str::FromStr for RiskInputs {
    type Err = FormError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "image" | "imageonly" => Ok(RiskInputs::Image),
            "rf" | "rfonly" => Ok(RiskInputs::Rf),
            "both" => Ok(RiskInputs::Both),
            other => Err(FormError::Validation(format!("unknown risk inputs `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskModelConfig {
    pub inputs: RiskInputs,
    /// Scaling of the image-branch output, `s * k`.
    pub s: usize,
    pub dropout: f64,
    pub rf_group: RfGroup,
    /// Image feature width `D`.
    pub feature_dim: usize,
    pub hidden: usize,
    /// Image-branch output width when there are no risk factors.
    pub image_only_width: usize,
    pub train: TrainConfig,
}

impl Default for RiskModelConfig {
    fn default() -> Self {
        RiskModelConfig {
            inputs: RiskInputs::Both,
            s: 5,
            dropout: 0.5,
            rf_group: RfGroup::Base,
            feature_dim: 2048,
            hidden: 128,
            image_only_width: 128,
            train: TrainConfig::default(),
        }
    }
}

impl RiskModelConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.s == 0 {
            return Err(FormError::Config("s must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FormError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.inputs.uses_rf() && k == 0 {
            return Err(FormError::Config("risk-factor inputs requested but k = 0".into()));
        }
        if self.inputs.uses_image() && self.feature_dim == 0 {
            return Err(FormError::Config("image inputs requested but feature_dim = 0".into()));
        }
        if self.hidden == 0 || self.image_only_width == 0 {
            return Err(FormError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Output width of the image branch.
    pub fn branch_width(&self, k: usize) -> usize {
        match self.inputs {
            RiskInputs::Image => self.image_only_width,
            _ => self.s * k,
        }
    }

    /// Input width of the head.
    pub fn head_width(&self, k: usize) -> usize {
        match self.inputs {
            RiskInputs::Image => self.image_only_width,
            RiskInputs::Rf => k,
            RiskInputs::Both => self.s * k + k,
        }
    }
}

/// Image branch (optional) feeding a shared classification head.
#[derive(Debug, Clone)]
pub struct RiskModel {
    pub config: RiskModelConfig,
    pub k: usize,
    branch: Option<Sequential<f32>>,
    head: Sequential<f32>,
    /// Per-feature `(mean, std)` of the training image features.
    feature_scaling: Option<(Vec<f32>, Vec<f32>)>,
    trained: bool,
}

pub fn build_risk_model(config: &RiskModelConfig, k: usize) -> Result<RiskModel> {
    config.validate(k)?;
    let k = if config.inputs.uses_rf() { k } else { 0 };
    let h = config.hidden;
    let branch = if config.inputs.uses_image() {
        let specs = [
            LayerSpec::FullyConnected { n_out: h },
            LayerSpec::ReLU,
            LayerSpec::FullyConnected { n_out: config.branch_width(k) },
            LayerSpec::ReLU,
        ];
        Some(Sequential::new(&[config.feature_dim], &specs, seeds::derive(config.train.seed, &[0xB1]))?)
    } else {
        None
    };
    let head_specs = [
        LayerSpec::Dropout { rate: config.dropout },
        LayerSpec::FullyConnected { n_out: h },
        LayerSpec::ReLU,
        LayerSpec::FullyConnected { n_out: 2 },
        LayerSpec::Softmax,
    ];
    let head = Sequential::new(&[config.head_width(k)], &head_specs, seeds::derive(config.train.seed, &[0xB2]))?;
    Ok(RiskModel { config: config.clone(), k, branch, head, feature_scaling: None, trained: false })
}

/// Row-aligned model inputs: `features` is `n x D`, `rf` is `n x k`.
#[derive(Debug, Clone, Default)]
pub struct RiskBatch {
    pub features: Option<Array2<f32>>,
    pub rf: Option<Array2<f32>>,
}

impl RiskBatch {
    pub fn len(&self) -> usize {
        self.features.as_ref().or(self.rf.as_ref()).map_or(0, |a| a.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> RiskBatch {
        RiskBatch {
            features: self.features.as_ref().map(|a| a.select(Axis(0), idx)),
            rf: self.rf.as_ref().map(|a| a.select(Axis(0), idx)),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RiskDataset {
    pub inputs: RiskBatch,
    pub labels: Vec<usize>,
}

impl Dataset for RiskDataset {
    type Batch = RiskBatch;

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn batch(&self, idx: &[usize], _augment: Option<&mut ChaCha8Rng>) -> RiskBatch {
        self.inputs.select(idx)
    }
}

fn to_f32_matrix(rows: &[Vec<f64>]) -> Array2<f32> {
    let w = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), w), |(i, j)| rows[i][j] as f32)
}

impl RiskBatch {
    pub fn from_rows(features: Option<&[Vec<f32>]>, rf: Option<&[Vec<f64>]>) -> Self {
        RiskBatch {
            features: features.map(|f| {
                let w = f.first().map_or(0, Vec::len);
                Array2::from_shape_fn((f.len(), w), |(i, j)| f[i][j])
            }),
            rf: rf.map(to_f32_matrix),
        }
    }
}

impl RiskModel {
    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Output width of the image branch, `None` for a risk-factor-only model.
    pub fn branch_output_width(&self) -> Option<usize> {
        self.branch.as_ref().map(|b| b.output_dims()[0])
    }

    pub fn head_input_width(&self) -> usize {
        self.head.input_dims()[0]
    }

    fn check(&self, batch: &RiskBatch) -> Result<()> {
        let inputs = self.config.inputs;
        let want = |a: &Option<Array2<f32>>, used: bool, width: usize, name: &str| -> Result<()> {
            match (a, used) {
                (Some(a), true) if a.ncols() != width => {
                    Err(FormError::DimMismatch { expected: vec![width], got: vec![a.ncols()] })
                }
                (None, true) => Err(FormError::Validation(format!("{name} inputs missing for a {inputs:?} model"))),
                _ => Ok(()),
            }
        };
        want(&batch.features, inputs.uses_image(), self.config.feature_dim, "image feature")?;
        want(&batch.rf, inputs.uses_rf(), self.k, "risk-factor")?;
        if let (Some(f), Some(r), RiskInputs::Both) = (&batch.features, &batch.rf, inputs) {
            if f.nrows() != r.nrows() {
                return Err(FormError::DimMismatch { expected: vec![f.nrows()], got: vec![r.nrows()] });
            }
        }
        Ok(())
    }
}

impl Classifier<f32> for RiskModel {
    type Batch = RiskBatch;

    fn forward_probs(&mut self, batch: &RiskBatch, training: bool, rng: &mut ChaCha8Rng) -> Result<Array2<f32>> {
        self.check(batch)?;
        let head_in = match (&mut self.branch, self.config.inputs) {
            (Some(branch), inputs) => {
                let mut feats = batch.features.clone().expect("checked");
                if let Some((m, sd)) = &self.feature_scaling {
                    for mut row in feats.rows_mut() {
                        row.iter_mut().zip(m).zip(sd).for_each(|((v, m), s)| *v = (*v - m) / s);
                    }
                }
                let feats = feats.into_dyn();
                let b = branch.forward(&feats, training, rng)?.into_dimensionality::<Ix2>().expect("dense output");
                if inputs == RiskInputs::Both {
                    concatenate(Axis(1), &[b.view(), batch.rf.as_ref().expect("checked").view()])
                        .expect("row counts checked")
                } else {
                    b
                }
            }
            (None, _) => batch.rf.clone().expect("checked"),
        };
        let p = self.head.forward(&head_in.into_dyn(), training, rng)?;
        Ok(p.into_dimensionality::<Ix2>().expect("softmax output"))
    }

    fn backward_logits(&mut self, grad: Array2<f32>) -> Result<()> {
        let n_head = self.head.specs().len();
        let g_in = self.head.backward_through(grad.into_dyn(), n_head - 1)?;
        if let Some(branch) = &mut self.branch {
            let g_in: Array2<f32> = g_in.into_dimensionality().expect("dense gradient");
            let w = branch.output_dims()[0];
            let g_b: ArrayD<f32> = g_in.slice(s![.., ..w]).to_owned().into_dyn();
            branch.backward(g_b)?;
        }
        Ok(())
    }

    fn params(&self) -> Vec<&Tensor<f32>> {
        let mut p: Vec<&Tensor<f32>> = self.branch.iter().flat_map(|b| b.params()).collect();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut p: Vec<&mut Tensor<f32>> = self.branch.iter_mut().flat_map(|b| b.params_mut()).collect();
        p.extend(self.head.params_mut());
        p
    }

    fn n_classes(&self) -> usize {
        2
    }
}

/// Train with the shared hyperparameters; the best-validation-AUC epoch is
/// kept when a validation set is given. Image features are standardized with
/// training-set statistics.
pub fn train_risk_model(
    train: &RiskDataset,
    val: Option<&RiskDataset>,
    config: &RiskModelConfig,
    k: usize,
) -> Result<(RiskModel, TrainReport)> {
    let mut model = build_risk_model(config, k)?;
    model.check(&train.inputs)?;
    if let Some(v) = val {
        model.check(&v.inputs)?;
    }
    if let Some(f) = &train.inputs.features {
        model.feature_scaling = Some(standardization(f));
    }
    let val = val.filter(|v| !v.is_empty());
    let report = nncore::train(&mut model, train, val, &config.train)?;
    model.trained = true;
    Ok((model, report))
}

/// Column means and standard deviations; constant columns get std 1.
fn standardization(f: &Array2<f32>) -> (Vec<f32>, Vec<f32>) {
    let n = f.nrows().max(1) as f64;
    f.columns()
        .into_iter()
        .map(|c| {
            let m = c.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = c.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (m as f32, if sd > 1e-12 { sd as f32 } else { 1.0 })
        })
        .unzip()
}

/// Positive-class probabilities in eval mode.
pub fn predict_risk(model: &RiskModel, inputs: &RiskBatch) -> Result<Vec<f64>> {
    if !model.trained {
        return Err(FormError::Untrained);
    }
    model.check(inputs)?;
    let mut m = model.clone();
    let data = RiskDataset { inputs: inputs.clone(), labels: vec![0; inputs.len()] };
    nncore::predict_positive(&mut m, &data, 256)
}

/// Patient score from per-side probabilities: the maximum (the weaker hip
/// dominates). `None` when no side was included.
pub fn aggregate_patient_score(sides: &[f64]) -> Option<f64> {
    sides.iter().copied().reduce(f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patient_id: String,
    pub probability: f64,
    pub fold: usize,
    pub repetition: usize,
}

pub fn write_predictions<W: Write>(w: W, rows: &[PredictionRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cfg(inputs: RiskInputs, d: usize) -> RiskModelConfig {
        RiskModelConfig {
            inputs,
            feature_dim: d,
            hidden: 16,
            train: TrainConfig { epochs: 5, batch_size: 8, learning_rate: 1e-2, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn width_law_and_branch_omission() {
        let m = build_risk_model(&cfg(RiskInputs::Both, 32), 4).unwrap();
        assert_eq!(m.branch.as_ref().unwrap().output_dims(), &[20]);
        assert_eq!(m.head.input_dims(), &[24]);
        let m = build_risk_model(&RiskModelConfig { feature_dim: 2048, ..cfg(RiskInputs::Image, 0) }, 0).unwrap();
        assert_eq!(m.branch.as_ref().unwrap().output_dims(), &[128]);
        let m = build_risk_model(&cfg(RiskInputs::Rf, 0), 7).unwrap();
        assert!(m.branch.is_none());
        assert_eq!(m.head.input_dims(), &[7]);
        assert!(build_risk_model(&cfg(RiskInputs::Both, 8), 0).is_err());
        assert!(build_risk_model(&RiskModelConfig { s: 0, ..cfg(RiskInputs::Rf, 0) }, 2).is_err());
    }

    #[test]
    fn aggregation_is_max() {
        assert_eq!(aggregate_patient_score(&[0.2, 0.7]), Some(0.7));
        assert_eq!(aggregate_patient_score(&[0.4]), Some(0.4));
        assert_eq!(aggregate_patient_score(&[0.3, 0.3]), Some(0.3));
        assert_eq!(aggregate_patient_score(&[]), None);
    }

    fn toy(n: usize, d: usize, seed: u64) -> RiskDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let f = Array2::from_shape_fn((n, d), |(i, j)| {
            rng.gen::<f32>() + if j == 0 && labels[i] == 1 { 1.0 } else { 0.0 }
        });
        let r = Array2::from_shape_fn((n, 2), |_| rng.gen::<f32>());
        RiskDataset { inputs: RiskBatch { features: Some(f), rf: Some(r) }, labels }
    }

    #[test]
    fn rf_only_model_ignores_image_data() {
        let data = toy(40, 6, 1);
        let (m, _) = train_risk_model(&data, None, &cfg(RiskInputs::Rf, 0), 2).unwrap();
        let a = predict_risk(&m, &data.inputs).unwrap();
        let mut other = data.inputs.clone();
        other.features.as_mut().unwrap().mapv_inplace(|v| v * 10.0 - 3.0);
        assert_eq!(a, predict_risk(&m, &other).unwrap());
        assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn both_learns_a_separable_feature_and_is_deterministic() {
        let data = toy(120, 6, 2);
        let c = RiskModelConfig { train: TrainConfig { epochs: 30, ..cfg(RiskInputs::Both, 6).train }, ..cfg(RiskInputs::Both, 6) };
        let (m, rep) = train_risk_model(&data, Some(&data), &c, 2).unwrap();
        assert!(rep.selected_val_auc.unwrap() > 0.95, "{rep:?}");
        let (m2, _) = train_risk_model(&data, Some(&data), &c, 2).unwrap();
        assert_eq!(predict_risk(&m, &data.inputs).unwrap(), predict_risk(&m2, &data.inputs).unwrap());
    }

    #[test]
    fn untrained_and_mismatched_inputs_are_rejected() {
        let data = toy(10, 6, 3);
        let m = build_risk_model(&cfg(RiskInputs::Both, 6), 2).unwrap();
        assert!(matches!(predict_risk(&m, &data.inputs), Err(FormError::Untrained)));
        let (m, _) = train_risk_model(&data, None, &cfg(RiskInputs::Both, 6), 2).unwrap();
        let bad = RiskBatch { features: Some(Array2::zeros((3, 5))), rf: Some(Array2::zeros((3, 2))) };
        assert!(matches!(predict_risk(&m, &bad), Err(FormError::DimMismatch { .. })));
    }
}
