//! Cox proportional hazards on PCA-reduced image features plus risk factors,
//! and the external-score passthrough baseline.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cohort::PatientRecord;
use crate::evalharness::roc_auc;
use crate::{FormError, Result};

fn to_dmatrix(x: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `n_components x D`, orthonormal rows.
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Centered SVD. Each component is signed so its largest-magnitude entry is
/// positive.
pub fn pca_fit(x: ArrayView2<f64>, n_components: usize) -> Result<PcaProjection> {
    let (n, d) = x.dim();
    if n_components == 0 || n <= n_components || d < n_components {
        return Err(FormError::Validation(format!(
            "PCA needs n_samples > n_components <= D, got n = {n}, D = {d}, n_components = {n_components}"
        )));
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = &x - &mean;
    let svd = to_dmatrix(centered.view()).svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let tol = sv.iter().cloned().fold(0.0, f64::max) * (n.max(d) as f64) * f64::EPSILON;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    if rank < n_components {
        return Err(FormError::RankDeficient(format!("feature rank {rank} < {n_components} components")));
    }
    let mut components = Vec::with_capacity(n_components);
    let mut ratio = Vec::with_capacity(n_components);
    for &c in order.iter().take(n_components) {
        let mut row: Vec<f64> = vt.row(c).iter().copied().collect();
        let big = row.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if big < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(row);
        ratio.push(sv[c] * sv[c] / total);
    }
    Ok(PcaProjection { mean: mean.to_vec(), components, explained_variance_ratio: ratio })
}

impl PcaProjection {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(FormError::DimMismatch { expected: vec![self.mean.len()], got: vec![x.ncols()] });
        }
        Ok(Array2::from_shape_fn((x.nrows(), self.components.len()), |(i, c)| {
            x.row(i).iter().zip(&self.mean).zip(&self.components[c]).map(|((v, m), w)| (v - m) * w).sum()
        }))
    }

    pub fn inverse_transform(&self, z: ArrayView2<f64>) -> Array2<f64> {
        Array2::from_shape_fn((z.nrows(), self.mean.len()), |(i, j)| {
            self.mean[j] + (0..self.components.len()).map(|c| z[[i, c]] * self.components[c][j]).sum::<f64>()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ties {
    Breslow,
    Efron,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoxConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub ties: Ties,
    /// Largest accepted spread of the linear predictor; beyond it the
    /// likelihood is treated as monotone (relative hazard `e^30`).
    pub max_lp_range: f64,
}

impl Default for CoxConfig {
    fn default() -> Self {
        CoxConfig { tol: 1e-8, max_iter: 100, ties: Ties::Breslow, max_lp_range: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub beta: Vec<f64>,
    pub names: Vec<String>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    /// From the inverse observed information; `NaN` where it is singular.
    pub std_errors: Vec<f64>,
}

/// Survival data for one subject set, times already truncated at the horizon.
#[derive(Debug, Clone)]
pub struct SurvivalData<'a> {
    pub x: ArrayView2<'a, f64>,
    pub times: &'a [f64],
    pub events: &'a [bool],
}

struct Derivs {
    loglik: f64,
    grad: DVector<f64>,
    info: DMatrix<f64>,
}

/// Log partial likelihood with its gradient and observed information.
fn partial_likelihood(data: &SurvivalData, order: &[usize], beta: &DVector<f64>, ties: Ties) -> Derivs {
    let p = beta.len();
    let lp: Vec<f64> = (0..data.x.nrows()).map(|i| (0..p).map(|j| data.x[[i, j]] * beta[j]).sum()).collect();
    let shift = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lp.iter().map(|v| (v - shift).exp()).collect();
    let xrow = |i: usize| DVector::from_fn(p, |j, _| data.x[[i, j]]);
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut out = Derivs { loglik: 0.0, grad: DVector::zeros(p), info: DMatrix::zeros(p, p) };
    // `order` runs by decreasing time; a tie group joins the risk set whole
    let mut k = 0;
    while k < order.len() {
        let t = data.times[order[k]];
        let mut end = k;
        let (mut d0, mut d1, mut d2, mut nd) = (0.0, DVector::zeros(p), DMatrix::zeros(p, p), 0usize);
        while end < order.len() && data.times[order[end]] == t {
            let i = order[end];
            let xi = xrow(i);
            s0 += w[i];
            s1 += &xi * w[i];
            s2 += &xi * xi.transpose() * w[i];
            if data.events[i] {
                d0 += w[i];
                d1 += &xi * w[i];
                d2 += &xi * xi.transpose() * w[i];
                nd += 1;
                out.loglik += lp[i] - shift;
                out.grad += &xi;
            }
            end += 1;
        }
        for l in 0..nd {
            let c = match ties {
                Ties::Breslow => 0.0,
                Ties::Efron => l as f64 / nd as f64,
            };
            let a0 = s0 - c * d0;
            let a1 = &s1 - &d1 * c;
            let a2 = &s2 - &d2 * c;
            out.loglik -= a0.ln();
            out.grad -= &a1 / a0;
            out.info += a2 / a0 - &a1 * a1.transpose() / (a0 * a0);
        }
        k = end;
    }
    out
}

/// Solve `info * step = grad`; Cholesky when positive definite, otherwise the
/// SVD pseudo-inverse.
fn newton_step(info: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = info.clone().cholesky() {
        return ch.solve(grad);
    }
    let svd = info.clone().svd(true, true);
    let eps = svd.singular_values.max() * info.nrows() as f64 * 1e-12;
    svd.solve(grad, eps.max(1e-300)).unwrap_or_else(|_| DVector::zeros(grad.len()))
}

/// Newton–Raphson on the log partial likelihood with step halving. Converged
/// when the gradient infinity-norm is below `tol` and the Newton step is
/// negligible.
pub fn cox_fit(data: &SurvivalData, names: &[String], cfg: &CoxConfig) -> Result<CoxModel> {
    let (n, p) = data.x.dim();
    if data.times.len() != n || data.events.len() != n {
        return Err(FormError::DimMismatch { expected: vec![n], got: vec![data.times.len(), data.events.len()] });
    }
    if names.len() != p {
        return Err(FormError::DimMismatch { expected: vec![p], got: vec![names.len()] });
    }
    if !data.events.iter().any(|&e| e) {
        return Err(FormError::Validation("Cox fit needs at least one event".into()));
    }
    if data.x.iter().chain(data.times).any(|v| !v.is_finite()) {
        return Err(FormError::Numeric("non-finite Cox input".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.times[b].total_cmp(&data.times[a]));
    let mut beta = DVector::zeros(p);
    let mut cur = partial_likelihood(data, &order, &beta, cfg.ties);
    let null_ll = cur.loglik;
    let lp_range = |b: &DVector<f64>| {
        let lp: Vec<f64> = (0..n).map(|i| (0..p).map(|j| data.x[[i, j]] * b[j]).sum()).collect();
        lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - lp.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let diverged = |it: usize, b: &DVector<f64>, why: &str| FormError::CoxDivergence {
        iterations: it,
        detail: format!("{why}; beta = {:?}", b.as_slice()),
    };
    let mut iterations = 0;
    loop {
        let step = newton_step(&cur.info, &cur.grad);
        // a vanishing gradient with O(1) Newton steps is a likelihood that
        // keeps rising toward an asymptote, not a maximum
        if cur.grad.amax() < cfg.tol && step.amax() <= 1e-6 * (1.0 + beta.amax()) {
            break;
        }
        if iterations == cfg.max_iter {
            return Err(diverged(iterations, &beta, &format!("gradient norm {:.3e}, step {:.3e}", cur.grad.amax(), step.amax())));
        }
        iterations += 1;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * scale;
            let next = partial_likelihood(data, &order, &cand, cfg.ties);
            if next.loglik.is_finite() && next.loglik >= cur.loglik - 1e-12 * cur.loglik.abs().max(1.0) {
                beta = cand;
                cur = next;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(diverged(iterations, &beta, "step halving failed to increase the likelihood"));
        }
        if lp_range(&beta) > cfg.max_lp_range {
            return Err(diverged(iterations, &beta, "linear predictor unbounded (monotone likelihood)"));
        }
    }
    let std_errors = match cur.info.clone().try_inverse() {
        Some(inv) if cur.info.clone().cholesky().is_some() => (0..p).map(|j| inv[(j, j)].sqrt()).collect(),
        _ => vec![f64::NAN; p],
    };
    Ok(CoxModel {
        beta: beta.iter().copied().collect(),
        names: names.to_vec(),
        iterations,
        gradient_norm: cur.grad.amax(),
        log_likelihood: cur.loglik,
        null_log_likelihood: null_ll,
        std_errors,
    })
}

/// Breslow/Efron log partial likelihood at an arbitrary `beta`.
pub fn cox_log_likelihood(data: &SurvivalData, beta: &[f64], ties: Ties) -> f64 {
    let mut order: Vec<usize> = (0..data.x.nrows()).collect();
    order.sort_by(|&a, &b| data.times[b].total_cmp(&data.times[a]));
    partial_likelihood(data, &order, &DVector::from_column_slice(beta), ties).loglik
}

/// Linear predictor `x . beta` per row.
pub fn cox_predict(model: &CoxModel, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    if x.ncols() != model.beta.len() {
        return Err(FormError::DimMismatch { expected: vec![model.beta.len()], got: vec![x.ncols()] });
    }
    let b = Array1::from(model.beta.clone());
    Ok(x.dot(&b).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub beta: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxReport {
    pub coefficients: Vec<CoefficientRow>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
}

/// Per-covariate Wald statistics.
pub fn cox_report(model: &CoxModel) -> CoxReport {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let coefficients = model
        .names
        .iter()
        .zip(&model.beta)
        .zip(&model.std_errors)
        .map(|((name, &beta), &se)| {
            let z = beta / se;
            CoefficientRow { name: name.clone(), beta, std_error: se, z, p_value: 2.0 * normal.sf(z.abs()) }
        })
        .collect();
    CoxReport {
        coefficients,
        iterations: model.iterations,
        gradient_norm: model.gradient_norm,
        log_likelihood: model.log_likelihood,
        null_log_likelihood: model.null_log_likelihood,
    }
}

/// Scores read straight from a manifest column (e.g. an externally computed
/// FRAX probability).
pub fn external_score_baseline(records: &[PatientRecord], column: &str) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            r.rf_values.get(column).copied().ok_or_else(|| FormError::MissingRiskFactor {
                patient_id: r.patient_id.clone(),
                factor: column.to_string(),
            })
        })
        .collect()
}

/// Patient-level inputs of the PCA + risk-factor Cox baseline.
#[derive(Debug, Clone)]
pub struct CoxPcaInputs {
    /// Side-averaged image features (`n x D`); `None` for a risk-factor-only fit.
    pub features: Option<Array2<f64>>,
    pub rf: Option<Array2<f64>>,
    pub rf_names: Vec<String>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct CoxPcaModel {
    pub pca: Option<PcaProjection>,
    pub cox: CoxModel,
}

impl CoxPcaInputs {
    fn design(&self, pca: Option<&PcaProjection>) -> Result<Array2<f64>> {
        let n = self.times.len();
        let mut blocks: Vec<Array2<f64>> = Vec::new();
        if let (Some(f), Some(p)) = (&self.features, pca) {
            blocks.push(p.transform(f.view())?);
        }
        if let Some(r) = &self.rf {
            blocks.push(r.clone());
        }
        if blocks.is_empty() {
            return Err(FormError::Config("Cox baseline has no covariates".into()));
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let x = ndarray::concatenate(Axis(1), &views).map_err(|e| FormError::Numeric(e.to_string()))?;
        if x.nrows() != n {
            return Err(FormError::DimMismatch { expected: vec![n], got: vec![x.nrows()] });
        }
        Ok(x)
    }

    fn names(&self, n_components: usize) -> Vec<String> {
        let mut names: Vec<String> = if self.features.is_some() {
            (0..n_components).map(|c| format!("pc_{c}")).collect()
        } else {
            Vec::new()
        };
        names.extend(self.rf_names.iter().cloned());
        names
    }
}

pub fn fit_cox_pca(train: &CoxPcaInputs, n_components: usize, cfg: &CoxConfig) -> Result<CoxPcaModel> {
    let pca = match &train.features {
        Some(f) => Some(pca_fit(f.view(), n_components)?),
        None => None,
    };
    let x = train.design(pca.as_ref())?;
    let data = SurvivalData { x: x.view(), times: &train.times, events: &train.events };
    let nc = pca.as_ref().map_or(0, PcaProjection::n_components);
    let cox = cox_fit(&data, &train.names(nc), cfg)?;
    Ok(CoxPcaModel { pca, cox })
}

pub fn predict_cox_pca(model: &CoxPcaModel, inputs: &CoxPcaInputs) -> Result<Vec<f64>> {
    cox_predict(&model.cox, inputs.design(model.pca.as_ref())?.view())
}

/// Fit with 1..=`max_components` PCA components and keep the count with the
/// best validation AUC (`labels` marks validation positives).
pub fn select_cox_pca(
    train: &CoxPcaInputs,
    val: &CoxPcaInputs,
    val_labels: &[bool],
    max_components: usize,
    cfg: &CoxConfig,
) -> Result<(CoxPcaModel, f64)> {
    let candidates = if train.features.is_some() { 1..=max_components.max(1) } else { 0..=0 };
    let mut best: Option<(CoxPcaModel, f64)> = None;
    let mut last_err = None;
    for nc in candidates {
        let fitted = fit_cox_pca(train, nc, cfg).and_then(|m| {
            let auc = roc_auc(&predict_cox_pca(&m, val)?, val_labels)?;
            Ok((m, auc))
        });
        match fitted {
            Ok((m, auc)) => {
                if best.as_ref().is_none_or(|(_, b)| auc > *b) {
                    best = Some((m, auc));
                }
            }
            Err(e) => {
                log::warn!("Cox baseline with {nc} components skipped: {e}");
                last_err = Some(e);
            }
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| FormError::Config("no Cox candidate".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pca_rank_one_line() {
        let x = array![[0.0, 0.0], [1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let p = pca_fit(x.view(), 1).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(p.components[0][1] > 0.0);
        assert!(matches!(pca_fit(x.view(), 2), Err(FormError::RankDeficient(_))));
    }

    #[test]
    fn pca_full_reconstruction_and_centered_mean() {
        let x = array![[1.0, 2.0, 0.5], [0.3, -1.0, 2.0], [2.0, 0.0, 1.0], [-1.0, 1.5, 0.0], [0.0, 0.2, -0.7]];
        let p = pca_fit(x.view(), 3).unwrap();
        let back = p.inverse_transform(p.transform(x.view()).unwrap().view());
        assert!((&back - &x).iter().all(|v| v.abs() < 1e-10));
        let m = Array2::from_shape_vec((1, 3), p.mean.clone()).unwrap();
        assert!(p.transform(m.view()).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cox_ln2_fixture() {
        let x = array![[1.0], [0.0], [1.0]];
        let data = SurvivalData { x: x.view(), times: &[1.0, 2.0, 3.0], events: &[true, true, true] };
        let m = cox_fit(&data, &["z".into()], &CoxConfig::default()).unwrap();
        assert!((m.beta[0] + 2f64.ln() / 2.0).abs() < 1e-8, "{:?}", m.beta);
        assert!(m.log_likelihood >= m.null_log_likelihood);
    }

    #[test]
    fn cox_identical_covariates_give_zero() {
        let x = array![[2.0], [2.0], [2.0], [2.0]];
        let data = SurvivalData { x: x.view(), times: &[1.0, 2.0, 2.0, 5.0], events: &[true, false, true, true] };
        let m = cox_fit(&data, &["z".into()], &CoxConfig::default()).unwrap();
        assert_eq!(m.beta, vec![0.0]);
        assert_eq!(m.iterations, 0);
    }

    #[test]
    fn cox_separation_diverges() {
        // the z = 1 subject is always the last one at risk
        let x = array![[0.0], [0.0], [0.0], [1.0]];
        let data = SurvivalData { x: x.view(), times: &[1.0, 2.0, 3.0, 4.0], events: &[true, true, true, true] };
        assert!(matches!(cox_fit(&data, &["z".into()], &CoxConfig::default()), Err(FormError::CoxDivergence { .. })));
        assert!(matches!(
            cox_fit(&SurvivalData { events: &[false; 4], ..data }, &["z".into()], &CoxConfig::default()),
            Err(FormError::Validation(_))
        ));
    }

    #[test]
    fn prediction_is_rank_invariant_to_shifts() {
        let m = CoxModel {
            beta: vec![0.5, -1.0],
            names: vec!["a".into(), "b".into()],
            iterations: 1,
            gradient_norm: 0.0,
            log_likelihood: 0.0,
            null_log_likelihood: 0.0,
            std_errors: vec![0.1, 0.2],
        };
        let x = array![[1.0, 2.0], [0.0, 0.0], [3.0, 1.0]];
        let mut shifted = x.clone();
        shifted.column_mut(0).mapv_inplace(|v| v + 7.0);
        let a = cox_predict(&m, x.view()).unwrap();
        let b = cox_predict(&m, shifted.view()).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| (v - u - 3.5).abs() < 1e-12));
        assert!(cox_predict(&m, array![[1.0]].view()).is_err());
        let r = cox_report(&m);
        assert!((r.coefficients[0].z - 5.0).abs() < 1e-12 && r.coefficients[0].p_value < 1e-5);
    }
}
