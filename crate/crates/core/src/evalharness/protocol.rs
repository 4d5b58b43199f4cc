use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{mean, std_dev, welch_test};
use super::{kfold_split, roc_auc, roc_curve, RocPoint};
use crate::baselines::{predict_cox_pca, select_cox_pca, CoxConfig, CoxPcaInputs};
use crate::cohort::{encode_risk_factors, fit_normalization, label_fracture, OutcomeStatus, PatientRecord, RfGroup, RiskFactorSchema};
use crate::extractor::{extract_gap_features, train_extractor, CropDataset, ExtractorConfig};
use crate::nncore::TrainConfig;
use crate::preprocess::{resize, CroppedHalf};
use crate::risk::{
    aggregate_patient_score, predict_risk, train_risk_model, PredictionRow, RiskBatch, RiskDataset, RiskInputs,
    RiskModelConfig,
};
use crate::{seeds, FormError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum ModelSpec {
    Form { inputs: RiskInputs },
    /// Cox on PCA-reduced, side-averaged image features and/or risk factors.
    Cox { inputs: RiskInputs },
    /// Scores read from a manifest column.
    External { column: String },
}

impl ModelSpec {
    pub fn name(&self) -> String {
        let tag = |i: &RiskInputs| match i {
            RiskInputs::Image => "image",
            RiskInputs::Rf => "rf",
            RiskInputs::Both => "both",
        };
        match self {
            ModelSpec::Form { inputs } => format!("form_{}", tag(inputs)),
            ModelSpec::Cox { inputs } => format!("cox_{}", tag(inputs)),
            ModelSpec::External { column } => format!("external_{column}"),
        }
    }

    fn uses_image(&self) -> bool {
        match self {
            ModelSpec::Form { inputs } | ModelSpec::Cox { inputs } => inputs.uses_image(),
            ModelSpec::External { .. } => false,
        }
    }

    fn uses_rf(&self) -> bool {
        match self {
            ModelSpec::Form { inputs } | ModelSpec::Cox { inputs } => inputs.uses_rf(),
            ModelSpec::External { .. } => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ProtocolMode {
    /// Every fold of every repetition; STD across folds, SE across reps.
    CrossValidation,
    /// One validation fold over all repetitions; SE across reps.
    Ablation { fold: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub k: usize,
    pub reps: usize,
    pub horizon_years: f64,
    pub mode: ProtocolMode,
    pub seed: u64,
    pub rf_group: RfGroup,
    /// `input_dims` is replaced by `extractor_input`, or by the crop size of
    /// the data when that is unset.
    pub extractor: ExtractorConfig,
    /// Resample crops to this size before they reach the extractor.
    pub extractor_input: Option<(usize, usize)>,
    /// Template for FORM models; `inputs`, `rf_group`, `feature_dim` and the
    /// seed are filled in per model.
    pub risk: RiskModelConfig,
    pub cox: CoxConfig,
    pub max_pca_components: usize,
    /// Probability above which a patient counts as predicted positive.
    pub fp_threshold: f64,
    /// Follow-up a censored patient needs to enter the FP subgroup.
    pub censored_min_followup: f64,
    /// Worker threads; `None` uses all logical cores.
    pub jobs: Option<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            k: 5,
            reps: 10,
            horizon_years: 10.0,
            mode: ProtocolMode::CrossValidation,
            seed: 0,
            rf_group: RfGroup::Base,
            extractor: ExtractorConfig::default(),
            extractor_input: None,
            risk: RiskModelConfig::default(),
            cox: CoxConfig::default(),
            max_pca_components: 5,
            fp_threshold: 0.5,
            censored_min_followup: 5.0,
            jobs: None,
        }
    }
}

impl ProtocolConfig {
    /// Reduced network sizes and step counts for single-CPU runs: an 8-channel
    /// backbone with 64 GAP features fed 48x48 resampled crops, 30 extractor
    /// epochs at learning rate 1e-3 and 50 risk epochs at 3e-3.
    pub fn desk_scale() -> Self {
        let fast = |epochs, learning_rate| TrainConfig { epochs, learning_rate, ..TrainConfig::default() };
        ProtocolConfig {
            extractor: ExtractorConfig {
                backbone_channels: 8,
                feature_dim: 64,
                train: fast(30, 1e-3),
                ..ExtractorConfig::default()
            },
            extractor_input: Some((48, 48)),
            risk: RiskModelConfig { train: fast(50, 3e-3), ..RiskModelConfig::default() },
            ..ProtocolConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.reps == 0 {
            return Err(FormError::Config(format!("need k >= 2 and reps >= 1, got k = {}, reps = {}", self.k, self.reps)));
        }
        if let ProtocolMode::Ablation { fold } = self.mode {
            if fold >= self.k {
                return Err(FormError::Config(format!("ablation fold {fold} outside 0..{}", self.k)));
            }
        }
        if !(self.horizon_years > 0.0) || !(0.0..=1.0).contains(&self.fp_threshold) {
            return Err(FormError::Config("horizon must be positive and fp_threshold in [0, 1]".into()));
        }
        if self.jobs == Some(0) {
            return Err(FormError::Config("jobs must be positive".into()));
        }
        Ok(())
    }
}

/// Inputs of one protocol run. `halves` holds the included, cropped image
/// halves; it may be empty when no model uses images.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolData<'a> {
    pub schema: &'a RiskFactorSchema,
    pub records: &'a [PatientRecord],
    pub halves: &'a [CroppedHalf],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAuc {
    pub repetition: usize,
    pub fold: usize,
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Why the fold is excluded from the aggregates.
    pub flagged: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpRate {
    pub mean: f64,
    pub se: f64,
    /// Subgroup size summed over repetitions.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpReport {
    pub threshold: f64,
    pub censored_subgroup: FpRate,
    pub validation_negatives: FpRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub spec: ModelSpec,
    pub folds: Vec<FoldAuc>,
    pub mean_auc: Option<f64>,
    pub std_across_folds: Option<f64>,
    pub se_across_reps: Option<f64>,
    /// Per-repetition mean AUC.
    pub rep_means: Vec<f64>,
    /// Per-fold mean AUC over repetitions.
    pub fold_means: Vec<f64>,
    pub censored_fp: Option<FpReport>,
    /// PCA components chosen per evaluated fold (Cox models).
    pub pca_components: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchComparison {
    pub a: String,
    pub b: String,
    /// `folds` or `repetitions`: which means entered the test.
    pub over: String,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub k: usize,
    pub reps: usize,
    pub mode: ProtocolMode,
    pub horizon_years: f64,
    pub seed: u64,
    pub rf_group: RfGroup,
    pub n_patients: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_censored: usize,
    pub models: Vec<ModelReport>,
    pub welch: Vec<WelchComparison>,
    pub warnings: Vec<String>,
}

impl EvaluationReport {
    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.name == name)
    }
}

/// Report plus per-patient outputs that do not belong in the JSON summary.
#[derive(Debug, Clone)]
pub struct ProtocolOutput {
    pub report: EvaluationReport,
    /// Per model: validation predictions of every fold and repetition.
    pub predictions: BTreeMap<String, Vec<PredictionRow>>,
    /// Per model: ROC of the pooled out-of-fold predictions of repetition 0.
    pub roc: BTreeMap<String, Vec<RocPoint>>,
}

struct Patient<'a> {
    record: &'a PatientRecord,
    status: OutcomeStatus,
    halves: Vec<&'a CroppedHalf>,
}

struct ModelFold {
    auc: FoldAuc,
    predictions: Vec<(usize, f64)>,
    fp: Option<[usize; 4]>,
    pca_components: Option<usize>,
}

fn is_undefined(e: &FormError) -> bool {
    matches!(e, FormError::EmptyClass(_) | FormError::UndefinedAuc(_))
}

/// Horizon-truncated survival time and event flag.
fn survival(record: &PatientRecord, horizon: f64) -> (f64, bool) {
    match record.event_time_years {
        Some(t) if record.event_observed && t <= horizon => (t, true),
        _ => (record.followup_years.min(horizon), false),
    }
}

/// Cross-validated evaluation of `models`, all sharing one patient set, one
/// fold split and, per (repetition, fold), one trained feature extractor.
pub fn run_protocol(data: ProtocolData, models: &[ModelSpec], cfg: &ProtocolConfig) -> Result<ProtocolOutput> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(FormError::Config("no models to evaluate".into()));
    }
    let names: BTreeSet<String> = models.iter().map(ModelSpec::name).collect();
    if names.len() != models.len() {
        return Err(FormError::Config("duplicate model in protocol".into()));
    }
    let needs_image = models.iter().any(ModelSpec::uses_image);
    let needs_rf = models.iter().any(ModelSpec::uses_rf);
    if needs_image && data.halves.is_empty() {
        return Err(FormError::Config("image-based model requested but no image features/crops".into()));
    }
    let mut warnings = Vec::new();
    let mut by_patient: BTreeMap<&str, Vec<&CroppedHalf>> = BTreeMap::new();
    for h in data.halves {
        by_patient.entry(h.patient_id.as_str()).or_default().push(h);
    }
    let mut patients: Vec<Patient> = Vec::new();
    let mut missing_rf = 0;
    for r in data.records {
        let halves = by_patient.remove(r.patient_id.as_str()).unwrap_or_default();
        if needs_image && halves.is_empty() {
            continue;
        }
        if needs_rf && data.schema.group(cfg.rf_group).any(|e| !r.rf_values.contains_key(&e.name)) {
            missing_rf += 1;
            continue;
        }
        let mut external_missing = false;
        for m in models {
            if let ModelSpec::External { column } = m {
                external_missing |= !r.rf_values.contains_key(column);
            }
        }
        if external_missing {
            return Err(FormError::MissingRiskFactor {
                patient_id: r.patient_id.clone(),
                factor: "external score column".into(),
            });
        }
        let status = label_fracture(r, cfg.horizon_years)?.status;
        patients.push(Patient { record: r, status, halves });
    }
    if missing_rf > 0 {
        warnings.push(format!("{missing_rf} patients excluded for missing {:?} risk factors", cfg.rf_group));
    }
    if !by_patient.is_empty() {
        warnings.push(format!("{} image patients have no manifest record", by_patient.len()));
    }
    let count = |s: OutcomeStatus| patients.iter().filter(|p| p.status == s).count();
    let (n_pos, n_neg, n_cens) = (count(OutcomeStatus::Positive), count(OutcomeStatus::Negative), count(OutcomeStatus::Censored));
    let ids: Vec<String> = patients.iter().map(|p| p.record.patient_id.clone()).collect();
    let strata: Vec<usize> = patients.iter().map(|p| p.status as usize).collect();
    // one split for every repetition and experiment; only training seeds vary
    let assignment = kfold_split(&ids, &strata, cfg.k, seeds::derive(cfg.seed, &[0x5_9117]))?;
    let fold_of: Vec<usize> = ids.iter().map(|id| assignment.fold_of(id).expect("assigned")).collect();

    let tasks: Vec<(usize, usize)> = match cfg.mode {
        ProtocolMode::CrossValidation => (0..cfg.reps).flat_map(|r| (0..cfg.k).map(move |f| (r, f))).collect(),
        ProtocolMode::Ablation { fold } => (0..cfg.reps).map(|r| (r, fold)).collect(),
    };
    let ctx = TaskContext { patients: &patients, fold_of: &fold_of, models, cfg, schema: data.schema };
    let run = || tasks.par_iter().map(|&(r, f)| ctx.run(r, f)).collect::<Result<Vec<_>>>();
    let results = match cfg.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| FormError::Config(e.to_string()))?
            .install(run)?,
        None => run()?,
    };

    let mut reports = Vec::new();
    let mut predictions = BTreeMap::new();
    let mut roc = BTreeMap::new();
    for (mi, spec) in models.iter().enumerate() {
        let name = spec.name();
        let mut folds = Vec::new();
        let mut preds = Vec::new();
        let mut pooled: (Vec<f64>, Vec<bool>) = (Vec::new(), Vec::new());
        let mut fp_by_rep: BTreeMap<usize, [usize; 4]> = BTreeMap::new();
        let mut pca = Vec::new();
        for ((r, f), res) in tasks.iter().zip(&results) {
            let m = &res[mi];
            folds.push(m.auc.clone());
            if let Some(why) = &m.auc.flagged {
                warnings.push(format!("{name}: repetition {r} fold {f} flagged: {why}"));
            }
            for &(pi, score) in &m.predictions {
                let p = &patients[pi];
                preds.push(PredictionRow { patient_id: p.record.patient_id.clone(), probability: score, fold: *f, repetition: *r });
                if *r == 0 && p.status != OutcomeStatus::Censored {
                    pooled.0.push(score);
                    pooled.1.push(p.status == OutcomeStatus::Positive);
                }
            }
            if let Some(c) = m.fp {
                let e = fp_by_rep.entry(*r).or_insert([0; 4]);
                (0..4).for_each(|i| e[i] += c[i]);
            }
            pca.extend(m.pca_components);
        }
        if let Ok(points) = roc_curve(&pooled.0, &pooled.1) {
            roc.insert(name.clone(), points);
        }
        predictions.insert(name.clone(), preds);
        reports.push(aggregate(spec, folds, &fp_by_rep, pca, cfg));
    }
    let mut welch = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            let (a, b) = (&reports[i], &reports[j]);
            for (over, xa, xb) in [("folds", &a.fold_means, &b.fold_means), ("repetitions", &a.rep_means, &b.rep_means)] {
                if let Ok(w) = welch_test(xa, xb) {
                    welch.push(WelchComparison { a: a.name.clone(), b: b.name.clone(), over: over.into(), t: w.t, df: w.df, p: w.p });
                }
            }
        }
    }
    let report = EvaluationReport {
        k: cfg.k,
        reps: cfg.reps,
        mode: cfg.mode,
        horizon_years: cfg.horizon_years,
        seed: cfg.seed,
        rf_group: cfg.rf_group,
        n_patients: patients.len(),
        n_positive: n_pos,
        n_negative: n_neg,
        n_censored: n_cens,
        models: reports,
        welch,
        warnings,
    };
    Ok(ProtocolOutput { report, predictions, roc })
}

fn rate_summary(rates: &[(usize, usize)]) -> Option<FpRate> {
    let valid: Vec<f64> = rates.iter().filter(|(_, n)| *n > 0).map(|&(k, n)| k as f64 / n as f64).collect();
    let n: usize = rates.iter().map(|r| r.1).sum();
    if valid.is_empty() {
        return None;
    }
    let m = mean(&valid);
    let se = if valid.len() >= 2 {
        std_dev(&valid) / (valid.len() as f64).sqrt()
    } else {
        (m * (1.0 - m) / n as f64).sqrt()
    };
    Some(FpRate { mean: m, se, n })
}

fn aggregate(
    spec: &ModelSpec,
    folds: Vec<FoldAuc>,
    fp_by_rep: &BTreeMap<usize, [usize; 4]>,
    pca_components: Vec<usize>,
    cfg: &ProtocolConfig,
) -> ModelReport {
    let ok: Vec<&FoldAuc> = folds.iter().filter(|f| f.flagged.is_none() && f.auc.is_some()).collect();
    let all: Vec<f64> = ok.iter().map(|f| f.auc.unwrap()).collect();
    let group_means = |key: fn(&FoldAuc) -> usize| -> Vec<f64> {
        let mut g: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for f in &ok {
            g.entry(key(f)).or_default().push(f.auc.unwrap());
        }
        g.values().map(|v| mean(v)).collect()
    };
    let rep_means = group_means(|f| f.repetition);
    let fold_means = group_means(|f| f.fold);
    let std_across_folds =
        (cfg.mode == ProtocolMode::CrossValidation && fold_means.len() >= 2).then(|| std_dev(&fold_means));
    let se_across_reps = (rep_means.len() >= 2).then(|| std_dev(&rep_means) / (rep_means.len() as f64).sqrt());
    let censored_fp = if fp_by_rep.is_empty() {
        None
    } else {
        let cens: Vec<(usize, usize)> = fp_by_rep.values().map(|c| (c[0], c[1])).collect();
        let neg: Vec<(usize, usize)> = fp_by_rep.values().map(|c| (c[2], c[3])).collect();
        match (rate_summary(&cens), rate_summary(&neg)) {
            (Some(c), Some(n)) => Some(FpReport { threshold: cfg.fp_threshold, censored_subgroup: c, validation_negatives: n }),
            _ => None,
        }
    };
    ModelReport {
        name: spec.name(),
        spec: spec.clone(),
        mean_auc: (!all.is_empty()).then(|| mean(&all)),
        std_across_folds,
        se_across_reps,
        rep_means,
        fold_means,
        folds,
        censored_fp,
        pca_components,
    }
}

/// Fraction of `scores` above `threshold` with its binomial standard error.
/// For the protocol's per-repetition SE see [`FpReport`].
pub fn censored_subgroup_fp(scores: &[f64], threshold: f64) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(FormError::Validation("empty censored subgroup".into()));
    }
    let k = scores.iter().filter(|&&s| s > threshold).count() as f64;
    let n = scores.len() as f64;
    let rate = k / n;
    Ok((rate, (rate * (1.0 - rate) / n).sqrt()))
}

struct TaskContext<'a> {
    patients: &'a [Patient<'a>],
    fold_of: &'a [usize],
    models: &'a [ModelSpec],
    cfg: &'a ProtocolConfig,
    schema: &'a RiskFactorSchema,
}

impl TaskContext<'_> {
    fn run(&self, rep: usize, fold: usize) -> Result<Vec<ModelFold>> {
        let cfg = self.cfg;
        let seed = seeds::derive(cfg.seed, &[rep as u64, fold as u64]);
        let (train, val): (Vec<usize>, Vec<usize>) = (0..self.patients.len()).partition(|&i| self.fold_of[i] != fold);
        let labeled = |set: &[usize]| -> Vec<usize> {
            set.iter().copied().filter(|&i| self.patients[i].status != OutcomeStatus::Censored).collect()
        };
        let (train_l, val_l) = (labeled(&train), labeled(&val));
        let is_pos = |i: usize| self.patients[i].status == OutcomeStatus::Positive;
        let val_y: Vec<bool> = val_l.iter().map(|&i| is_pos(i)).collect();
        let vp = val_y.iter().filter(|&&y| y).count();
        let vn = val_y.len() - vp;
        let flag_all = |why: String| {
            self.models
                .iter()
                .map(|_| ModelFold {
                    auc: FoldAuc { repetition: rep, fold, auc: None, n_pos: vp, n_neg: vn, flagged: Some(why.clone()) },
                    predictions: Vec::new(),
                    fp: None,
                    pca_components: None,
                })
                .collect()
        };
        if vp == 0 || vn == 0 {
            return Ok(flag_all(format!("single-class validation labels ({vp} positive, {vn} negative)")));
        }

        // risk factors normalized on the training split
        let rf: Vec<Vec<f64>> = if self.models.iter().any(ModelSpec::uses_rf) {
            let train_records: Vec<PatientRecord> = train.iter().map(|&i| self.patients[i].record.clone()).collect();
            let schema = fit_normalization(&train_records, self.schema)?;
            self.patients
                .iter()
                .map(|p| encode_risk_factors(p.record, &schema, cfg.rf_group))
                .collect::<Result<_>>()?
        } else {
            vec![Vec::new(); self.patients.len()]
        };
        let k_rf = rf.first().map_or(0, Vec::len);

        // image features: one extractor per (repetition, fold)
        let mut feats: Vec<Vec<Vec<f32>>> = vec![Vec::new(); self.patients.len()];
        if self.models.iter().any(ModelSpec::uses_image) {
            let input = |img: &Array2<f32>| match cfg.extractor_input {
                Some(dims) if dims != img.dim() => resize(img, dims),
                _ => img.clone(),
            };
            let crops = |set: &[usize]| -> CropDataset {
                let mut d = CropDataset::default();
                for &i in set {
                    for h in &self.patients[i].halves {
                        d.images.push(input(&h.image));
                        d.labels.push(is_pos(i) as usize);
                    }
                }
                d
            };
            let input_dims = cfg.extractor_input.unwrap_or_else(|| {
                train_l
                    .iter()
                    .chain(&val_l)
                    .find_map(|&i| self.patients[i].halves.first())
                    .map_or(cfg.extractor.input_dims, |h| h.image.dim())
            });
            let ecfg = ExtractorConfig {
                input_dims,
                train: TrainConfig { seed: seeds::derive(seed, &[1]), ..cfg.extractor.train.clone() },
                ..cfg.extractor.clone()
            };
            let ex = match train_extractor(&crops(&train_l), &crops(&val_l), &ecfg) {
                Ok((ex, _)) => ex,
                Err(e) if is_undefined(&e) => return Ok(flag_all(format!("extractor: {e}"))),
                Err(e) => return Err(e),
            };
            let all: Vec<usize> = (0..self.patients.len()).collect();
            let images: Vec<Array2<f32>> =
                all.iter().flat_map(|&i| self.patients[i].halves.iter().map(|h| input(&h.image))).collect();
            let g = extract_gap_features(&ex, &images)?;
            let mut row = 0;
            for &i in &all {
                for _ in &self.patients[i].halves {
                    feats[i].push(g.row(row).to_vec());
                    row += 1;
                }
            }
        }
        let d = feats.iter().flatten().next().map_or(0, Vec::len);

        let mut out = Vec::with_capacity(self.models.len());
        for spec in self.models {
            // keyed by name so a model's result does not depend on its companions
            let mseed = seeds::derive(seed, &[2, seeds::tag(&spec.name())]);
            let result = match spec {
                ModelSpec::Form { inputs } => self.form(*inputs, &train_l, &val_l, &val, &rf, k_rf, &feats, d, mseed),
                ModelSpec::Cox { inputs } => self.cox(*inputs, &train, &val_l, &val, &rf, &feats, d),
                ModelSpec::External { column } => {
                    Ok((val.iter().map(|&i| (i, self.patients[i].record.rf_values[column])).collect(), None))
                }
            };
            let (predictions, pca_components) = match result {
                Ok(x) => x,
                Err(e) if is_undefined(&e) => {
                    out.push(ModelFold {
                        auc: FoldAuc { repetition: rep, fold, auc: None, n_pos: vp, n_neg: vn, flagged: Some(e.to_string()) },
                        predictions: Vec::new(),
                        fp: None,
                        pca_components: None,
                    });
                    continue;
                }
                Err(e) => return Err(e),
            };
            let score: BTreeMap<usize, f64> = predictions.iter().copied().collect();
            let s: Vec<f64> = val_l.iter().map(|i| score[i]).collect();
            let auc = roc_auc(&s, &val_y)?;
            let fp = matches!(spec, ModelSpec::Form { .. }).then(|| {
                let mut c = [0usize; 4];
                for &i in &val {
                    let p = &self.patients[i];
                    let positive = score[&i] > cfg.fp_threshold;
                    match p.status {
                        OutcomeStatus::Censored if p.record.followup_years >= cfg.censored_min_followup => {
                            c[0] += positive as usize;
                            c[1] += 1;
                        }
                        OutcomeStatus::Negative => {
                            c[2] += positive as usize;
                            c[3] += 1;
                        }
                        _ => {}
                    }
                }
                c
            });
            out.push(ModelFold {
                auc: FoldAuc { repetition: rep, fold, auc: Some(auc), n_pos: vp, n_neg: vn, flagged: None },
                predictions,
                fp,
                pca_components,
            });
        }
        Ok(out)
    }

    /// Half-level samples (one per image half, or one per patient without
    /// images) of `set`; returns the owning patient of every row.
    fn risk_rows(&self, set: &[usize], inputs: RiskInputs, rf: &[Vec<f64>], feats: &[Vec<Vec<f32>>]) -> (RiskBatch, Vec<usize>) {
        let mut f_rows: Vec<Vec<f32>> = Vec::new();
        let mut r_rows: Vec<Vec<f64>> = Vec::new();
        let mut owner = Vec::new();
        for &i in set {
            if inputs.uses_image() {
                for f in &feats[i] {
                    f_rows.push(f.clone());
                    r_rows.push(rf[i].clone());
                    owner.push(i);
                }
            } else {
                r_rows.push(rf[i].clone());
                owner.push(i);
            }
        }
        let batch = RiskBatch::from_rows(
            inputs.uses_image().then_some(f_rows.as_slice()),
            inputs.uses_rf().then_some(r_rows.as_slice()),
        );
        (batch, owner)
    }

    #[allow(clippy::too_many_arguments)]
    fn form(
        &self,
        inputs: RiskInputs,
        train_l: &[usize],
        val_l: &[usize],
        val: &[usize],
        rf: &[Vec<f64>],
        k_rf: usize,
        feats: &[Vec<Vec<f32>>],
        d: usize,
        seed: u64,
    ) -> Result<(Vec<(usize, f64)>, Option<usize>)> {
        let rcfg = RiskModelConfig {
            inputs,
            rf_group: self.cfg.rf_group,
            feature_dim: if inputs.uses_image() { d } else { self.cfg.risk.feature_dim },
            train: TrainConfig { seed, ..self.cfg.risk.train.clone() },
            ..self.cfg.risk.clone()
        };
        let dataset = |set: &[usize]| {
            let (inputs, owner) = self.risk_rows(set, inputs, rf, feats);
            let labels = owner.iter().map(|&i| (self.patients[i].status == OutcomeStatus::Positive) as usize).collect();
            RiskDataset { inputs, labels }
        };
        let (model, _) = train_risk_model(&dataset(train_l), Some(&dataset(val_l)), &rcfg, k_rf)?;
        let (batch, owner) = self.risk_rows(val, inputs, rf, feats);
        let probs = predict_risk(&model, &batch)?;
        let mut per: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (o, p) in owner.into_iter().zip(probs) {
            per.entry(o).or_default().push(p);
        }
        Ok((per.into_iter().filter_map(|(i, v)| aggregate_patient_score(&v).map(|s| (i, s))).collect(), None))
    }

    #[allow(clippy::too_many_arguments)]
    fn cox(
        &self,
        inputs: RiskInputs,
        train: &[usize],
        val_l: &[usize],
        val: &[usize],
        rf: &[Vec<f64>],
        feats: &[Vec<Vec<f32>>],
        d: usize,
    ) -> Result<(Vec<(usize, f64)>, Option<usize>)> {
        let build = |set: &[usize]| -> CoxPcaInputs {
            let features = inputs.uses_image().then(|| {
                Array2::from_shape_fn((set.len(), d), |(r, j)| {
                    let f = &feats[set[r]];
                    f.iter().map(|v| v[j] as f64).sum::<f64>() / f.len() as f64
                })
            });
            let rfm = inputs.uses_rf().then(|| {
                let k = rf.first().map_or(0, Vec::len);
                Array2::from_shape_fn((set.len(), k), |(r, j)| rf[set[r]][j])
            });
            let (times, events) = set.iter().map(|&i| survival(self.patients[i].record, self.cfg.horizon_years)).unzip();
            CoxPcaInputs {
                features,
                rf: rfm,
                rf_names: self.schema.encoded_names(self.cfg.rf_group),
                times,
                events,
            }
        };
        let val_y: Vec<bool> = val_l.iter().map(|&i| self.patients[i].status == OutcomeStatus::Positive).collect();
        let (model, _) = select_cox_pca(&build(train), &build(val_l), &val_y, self.cfg.max_pca_components, &self.cfg.cox)?;
        let scores = predict_cox_pca(&model, &build(val))?;
        Ok((val.iter().copied().zip(scores).collect(), model.pca.as_ref().map(|p| p.n_components())))
    }
}

/// `report.json`, `fold_aucs.csv`, `predictions_<model>.csv`, `roc_<model>.csv`.
pub fn write_report(dir: &Path, out: &ProtocolOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&out.report)?)?;
    let mut w = csv::Writer::from_path(dir.join("fold_aucs.csv"))?;
    w.write_record(["model", "repetition", "fold", "auc", "n_pos", "n_neg", "flagged"])?;
    for m in &out.report.models {
        for f in &m.folds {
            w.write_record([
                m.name.clone(),
                f.repetition.to_string(),
                f.fold.to_string(),
                f.auc.map_or(String::new(), |a| format!("{a}")),
                f.n_pos.to_string(),
                f.n_neg.to_string(),
                f.flagged.clone().unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    for (name, rows) in &out.predictions {
        crate::risk::write_predictions(fs::File::create(dir.join(format!("predictions_{name}.csv")))?, rows)?;
    }
    for (name, pts) in &out.roc {
        let mut w = csv::Writer::from_path(dir.join(format!("roc_{name}.csv")))?;
        for p in pts {
            w.serialize(p)?;
        }
        w.flush()?;
    }
    Ok(())
}
