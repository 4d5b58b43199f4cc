use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sequential::stack_batch;
use super::{Adam, Classifier, Scalar};
use crate::evalharness::roc_auc;
use crate::{FormError, Result};

/// Indexable labelled samples that can be assembled into model batches.
pub trait Dataset {
    type Batch;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> usize;

    /// Assemble samples `idx`; `augment` is `Some` only during training when
    /// augmentation is enabled.
    fn batch(&self, idx: &[usize], augment: Option<&mut ChaCha8Rng>) -> Self::Batch;
}

/// Plain in-memory samples of identical shape.
#[derive(Debug, Clone)]
pub struct TensorDataset<F> {
    pub items: Vec<ArrayD<F>>,
    pub labels: Vec<usize>,
}

impl<F: Scalar> Dataset for TensorDataset<F> {
    type Batch = ArrayD<F>;

    fn len(&self) -> usize {
        self.items.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn batch(&self, idx: &[usize], _augment: Option<&mut ChaCha8Rng>) -> ArrayD<F> {
        let refs: Vec<&ArrayD<F>> = idx.iter().map(|&i| &self.items[i]).collect();
        stack_batch(&refs)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub class_weighting: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, batch_size: 36, learning_rate: 1e-4, class_weighting: true, augment: false, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// AUC of the training-mode predictions seen during the epoch.
    pub train_auc: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose weights were kept (best validation AUC, else the last).
    pub selected_epoch: usize,
    pub selected_val_auc: Option<f64>,
}

/// Per-class weights `N / (K * n_c)`.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(FormError::Validation(format!("label {y} out of range for {n_classes} classes")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(FormError::EmptyClass(c));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (n_classes as f64 * c as f64)).collect())
}

/// Mean of `w_i * -ln p_{i, y_i}` over the batch, and its gradient with
/// respect to the softmax logits, `w_i (p_i - e_{y_i}) / N`.
pub fn weighted_cross_entropy<F: Scalar>(probs: &Array2<F>, labels: &[usize], weights: &[f64]) -> (f64, Array2<F>) {
    let n = probs.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, mut row) in grad.rows_mut().into_iter().enumerate() {
        let y = labels[i];
        let w = weights[i];
        let p = probs[[i, y]].to_f64().unwrap_or(0.0).max(1e-300);
        loss -= w * p.ln();
        row[y] = row[y] - F::one();
        let s = F::c(w / n);
        row.mapv_inplace(|v| v * s);
    }
    (loss / n, grad)
}

/// Positive-class (index 1) probability for every sample, in eval mode.
pub fn predict_positive<M, D, F>(model: &mut M, data: &D, batch_size: usize) -> Result<Vec<f64>>
where
    F: Scalar,
    M: Classifier<F, Batch = D::Batch>,
    D: Dataset,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let probs = model.forward_probs(&data.batch(chunk, None), false, &mut rng)?;
        out.extend(probs.column(1).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(out)
}

fn auc_of(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    roc_auc(scores, &y).ok()
}

/// Mini-batch Adam on the class-weighted cross-entropy. When `val` is given
/// the weights of the epoch with the best validation AUC are restored at the
/// end (early-stopping checkpoint selection).
pub fn train<F, M, D>(model: &mut M, train_set: &D, val: Option<&D>, cfg: &TrainConfig) -> Result<TrainReport>
where
    F: Scalar,
    M: Classifier<F, Batch = D::Batch>,
    D: Dataset,
{
    if train_set.is_empty() {
        return Err(FormError::Validation("empty training set".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(FormError::Config("epochs and batch size must be positive".into()));
    }
    let k = model.n_classes();
    let labels: Vec<usize> = (0..train_set.len()).map(|i| train_set.label(i)).collect();
    let per_class = class_weights(&labels, k)?;
    let sample_w: Vec<f64> = labels.iter().map(|&y| if cfg.class_weighting { per_class[y] } else { 1.0 }).collect();
    let val_labels: Vec<usize> = val.map(|v| (0..v.len()).map(|i| v.label(i)).collect()).unwrap_or_default();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1B5_4A32_D192_ED03);
    let mut adam = Adam::new(cfg.learning_rate);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<ArrayD<F>>)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen_scores = Vec::with_capacity(order.len());
        let mut seen_labels = Vec::with_capacity(order.len());
        for chunk in order.chunks(cfg.batch_size) {
            let aug = cfg.augment.then_some(&mut augment_rng);
            let batch = train_set.batch(chunk, aug);
            let probs = model.forward_probs(&batch, true, &mut dropout_rng)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let w: Vec<f64> = chunk.iter().map(|&i| sample_w[i]).collect();
            let (loss, grad) = weighted_cross_entropy(&probs, &y, &w);
            loss_sum += loss * chunk.len() as f64;
            seen_scores.extend(probs.column(1).iter().map(|v| v.to_f64().unwrap_or(0.0)));
            seen_labels.extend_from_slice(&y);
            model.backward_logits(grad)?;
            adam.step(model.params_mut());
        }
        let val_auc = match val {
            Some(v) if !v.is_empty() => auc_of(&predict_positive(model, v, cfg.batch_size.max(64))?, &val_labels),
            _ => None,
        };
        if let Some(a) = val_auc {
            if best.as_ref().is_none_or(|(b, _, _)| a > *b) {
                best = Some((a, epoch, model.params().iter().map(|p| p.value.clone()).collect()));
            }
        }
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_auc: auc_of(&seen_scores, &seen_labels),
            val_auc,
        });
    }

    let (selected_epoch, selected_val_auc) = match best {
        Some((auc, epoch, snapshot)) => {
            for (p, v) in model.params_mut().into_iter().zip(snapshot) {
                p.value = v;
                p.grad = None;
            }
            (epoch, Some(auc))
        }
        None => (cfg.epochs - 1, None),
    };
    Ok(TrainReport { epochs: history, selected_epoch, selected_val_auc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weight_arithmetic() {
        let mut labels = vec![0usize; 90];
        labels.extend(vec![1usize; 10]);
        let w = class_weights(&labels, 2).unwrap();
        assert!((w[0] - 100.0 / 180.0).abs() < 1e-12);
        assert!((w[0] - 0.5556).abs() < 1e-4);
        assert!((w[1] - 5.0).abs() < 1e-12);
        assert!(matches!(class_weights(&[0, 0, 0], 2), Err(FormError::EmptyClass(1))));
    }

    #[test]
    fn balanced_weights_are_exactly_one() {
        let w = class_weights(&[0, 1, 1, 0, 0, 1], 2).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_gradient_vanishes_at_one_hot_optimum() {
        let probs = Array2::from_shape_vec((2, 2), vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let (loss, g) = weighted_cross_entropy(&probs, &[0, 1], &[1.0, 1.0]);
        assert!(loss.abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let probs = Array2::from_shape_vec((2, 2), vec![0.3f64, 0.7, 0.6, 0.4]).unwrap();
        let (loss, g) = weighted_cross_entropy(&probs, &[0, 1], &[0.0, 0.0]);
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }
}
