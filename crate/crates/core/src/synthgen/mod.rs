//! Synthetic cohorts drawn from a known logistic hazard model, with rendered
//! radiographs / CT volumes whose femoral-head cortical rim encodes the latent
//! bone quality. Every downstream metric therefore has a computable oracle.

mod io;
pub mod render;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{OutcomeLabel, PatientRecord, RiskFactorSchema};
use crate::evalharness::{auc_standard_error, roc_auc};
use crate::preprocess::{Completeness, ImageStudy, Modality, Side, StudyData};
use crate::{seeds, FormError, Result};

pub use io::{write_dataset, DatasetPaths, ImageIndexRow};
pub use render::{CtLayout, FemurGeometry, HalfParams, N_KEYPOINTS};

/// Horizon (years) over which the generator's probability `p` is defined.
pub const HAZARD_HORIZON_YEARS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    /// Intercept; `None` means calibrate to the target prevalence.
    pub a0: Option<f64>,
    /// Weight on `-q` (low bone quality raises risk).
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    /// Weight on the `q * age_z` interaction.
    pub a5: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Coefficients { a0: None, a1: 0.5, a2: 0.3, a3: 0.5, a4: 0.4, a5: -1.1 }
    }
}

impl Coefficients {
    pub fn no_signal() -> Self {
        Coefficients { a0: None, a1: 0.0, a2: 0.0, a3: 0.0, a4: 0.0, a5: 0.0 }
    }

    pub fn logit(&self, a0: f64, x: &Covariates) -> f64 {
        a0 - self.a1 * x.q + self.a2 * x.age_z + self.a3 * x.fall + self.a4 * x.smoking + self.a5 * x.q * x.age_z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalScore {
    /// Risk-factor-only logistic score with noise (a FRAX stand-in).
    RiskFactorModel,
    /// The generator's true probability.
    TrueProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub seed: u64,
    /// Fraction of patients imaged by CT; the rest get a radiograph.
    pub ct_fraction: f64,
    /// CT volume `(depth, height, width)`; depth is the anterior-posterior axis.
    pub ct_dims: (usize, usize, usize),
    /// Radiograph `(height, width)`, both hips side by side.
    pub xray_dims: (usize, usize),
    /// Inclusive range of the phantom's first depth row, counted from the
    /// bottom of the volume.
    pub phantom_rows_from_bottom: (usize, usize),
    pub phantom_height: usize,
    pub table_height: usize,
    pub coefficients: Coefficients,
    pub target_prevalence: f64,
    /// Fraction of patients whose follow-up ends before the horizon.
    pub censor_fraction: f64,
    pub implant_rate: f64,
    pub incomplete_rate: f64,
    /// Probability that any single risk-factor value is missing.
    pub missing_rf_rate: f64,
    pub external_score: ExternalScore,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 2000,
            seed: 0,
            ct_fraction: 0.0,
            ct_dims: (32, 64, 128),
            xray_dims: (224, 448),
            phantom_rows_from_bottom: (8, 11),
            phantom_height: 4,
            table_height: 2,
            coefficients: Coefficients::default(),
            target_prevalence: 0.03,
            censor_fraction: 1.0 / 3.0,
            implant_rate: 0.03,
            incomplete_rate: 0.05,
            missing_rf_rate: 0.0,
            external_score: ExternalScore::RiskFactorModel,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FormError::Config(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        let (d, h, w) = self.ct_dims;
        if d < 32 || h < 32 || w < 32 {
            return bad(format!("CT dims must be >= 32 per axis, got {:?}", self.ct_dims));
        }
        if self.xray_dims.0 < 64 || self.xray_dims.1 < 64 {
            return bad(format!("X-ray dims must be >= 64 per axis, got {:?}", self.xray_dims));
        }
        if !(self.target_prevalence > 0.0 && self.target_prevalence < 1.0) {
            return bad(format!("target prevalence must be in (0, 1), got {}", self.target_prevalence));
        }
        for (name, v) in [
            ("ct_fraction", self.ct_fraction),
            ("censor_fraction", self.censor_fraction),
            ("implant_rate", self.implant_rate),
            ("incomplete_rate", self.incomplete_rate),
            ("missing_rf_rate", self.missing_rf_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.implant_rate + self.incomplete_rate >= 1.0 {
            return bad("implant_rate + incomplete_rate must be < 1".into());
        }
        let (lo, hi) = self.phantom_rows_from_bottom;
        if lo > hi || lo < self.phantom_height + self.table_height + 1 || hi + 8 > d {
            return bad(format!("phantom placement {:?} does not fit depth {d}", self.phantom_rows_from_bottom));
        }
        Ok(())
    }
}

/// Hazard-model inputs for one patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub q: f64,
    pub age_z: f64,
    pub fall: f64,
    pub smoking: f64,
}

pub const AGE_MEAN: f64 = 74.0;
pub const AGE_SD: f64 = 6.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HalfTruth {
    pub side: Side,
    pub completeness: Completeness,
    /// Keypoints as `(row, col)` pixels of the half image (left halves in
    /// their mirrored orientation).
    pub keypoints: Vec<[f64; 2]>,
    pub rim_width: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub covariates: Covariates,
    /// True 10-year fracture probability.
    pub p: f64,
    /// Realized fracture within 10 years (independent of censoring).
    pub fracture_within_horizon: bool,
    pub modality: Modality,
    pub halves: Vec<HalfTruth>,
    /// CT only: first phantom depth row (all rows at/after it are removed).
    pub crop_row: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub coefficients: Coefficients,
    /// The intercept actually used (calibrated or configured).
    pub a0: f64,
    pub patients: Vec<PatientTruth>,
}

/// Everything needed to render any patient's study on demand.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub config: GeneratorConfig,
    pub schema: RiskFactorSchema,
    pub records: Vec<PatientRecord>,
    pub truth: GroundTruth,
    halves: Vec<[HalfParams; 2]>,
    layouts: Vec<Option<CtLayout>>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Draw {
    cov: Covariates,
    age: f64,
    bmi: f64,
    categorical: [f64; 5],
    abmd: f64,
    tbs: f64,
    score_noise: f64,
    u_event: f64,
    censored: bool,
    censor_u: f64,
    modality: Modality,
    halves: [HalfParams; 2],
    layout: Option<CtLayout>,
    missing: Vec<bool>,
}

fn draw_patient(cfg: &GeneratorConfig, i: usize) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[i as u64, 0]));
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let q: f64 = std.sample(&mut rng);
    let age = (AGE_MEAN + AGE_SD * std.sample(&mut rng)).clamp(65.0, 95.0);
    let bmi = (27.0 + 4.0 * std.sample(&mut rng)).clamp(16.0, 45.0);
    // fall, smoking, alcohol, cancer, hypertension
    let rates = [0.2, 0.1, 0.12, 0.15, 0.45];
    let categorical = rates.map(|r| if rng.gen::<f64>() < r { 1.0 } else { 0.0 });
    let abmd = 0.95 + 0.12 * (0.85 * q + 0.53 * std.sample(&mut rng));
    let tbs = 1.30 + 0.08 * (0.5 * q + 0.87 * std.sample(&mut rng));
    let score_noise = std.sample(&mut rng);
    let u_event = rng.gen::<f64>();
    let censored = rng.gen::<f64>() < cfg.censor_fraction;
    let censor_u = rng.gen::<f64>();
    let modality = if rng.gen::<f64>() < cfg.ct_fraction { Modality::Ct } else { Modality::Xray };
    let mut completeness = || {
        let u = rng.gen::<f64>();
        if u < cfg.implant_rate {
            Completeness::Implant
        } else if u < cfg.implant_rate + cfg.incomplete_rate {
            Completeness::Incomplete
        } else {
            Completeness::Complete
        }
    };
    let classes = [completeness(), completeness()];
    let halves = classes.map(|c| render::sample_half_params(q, c, &mut rng));
    let layout = (modality == Modality::Ct).then(|| {
        let (lo, hi) = cfg.phantom_rows_from_bottom;
        let from_bottom = rng.gen_range(lo..=hi);
        CtLayout {
            phantom_row: cfg.ct_dims.0 - from_bottom,
            phantom_height: cfg.phantom_height,
            table_height: cfg.table_height,
        }
    });
    let missing = (0..10).map(|_| rng.gen::<f64>() < cfg.missing_rf_rate).collect();
    let cov = Covariates { q, age_z: (age - AGE_MEAN) / AGE_SD, fall: categorical[0], smoking: categorical[1] };
    Draw { cov, age, bmi, categorical, abmd, tbs, score_noise, u_event, censored, censor_u, modality, halves, layout, missing }
}

/// Intercept giving mean `p` equal to `target` over `covs`, by bisection.
pub fn calibrate_intercept(coef: &Coefficients, covs: &[Covariates], target: f64) -> Result<f64> {
    let mean_p = |a0: f64| covs.iter().map(|x| logistic(coef.logit(a0, x))).sum::<f64>() / covs.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    if mean_p(lo) > target || mean_p(hi) < target {
        return Err(FormError::Generation(format!(
            "prevalence {target} unreachable with coefficients {coef:?} (range {:.4}..{:.4})",
            mean_p(lo),
            mean_p(hi)
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn to_pixels(uv: [f64; 2], h: usize, w: usize) -> [f64; 2] {
    [uv[1] * h as f64 - 0.5, uv[0] * w as f64 - 0.5]
}

impl SyntheticCohort {
    pub fn generate(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let draws: Vec<Draw> = (0..cfg.n_patients).into_par_iter().map(|i| draw_patient(cfg, i)).collect();
        let coef = cfg.coefficients;
        let covs: Vec<Covariates> = draws.iter().map(|d| d.cov).collect();
        let a0 = match coef.a0 {
            Some(a0) => a0,
            None => calibrate_intercept(&coef, &covs, cfg.target_prevalence)?,
        };
        let schema = RiskFactorSchema::default_schema();
        let names = schema.names().into_iter().map(String::from).collect::<Vec<_>>();
        let mut records = Vec::with_capacity(draws.len());
        let mut patients = Vec::with_capacity(draws.len());
        let mut halves = Vec::with_capacity(draws.len());
        let mut layouts = Vec::with_capacity(draws.len());
        for (i, d) in draws.into_iter().enumerate() {
            let id = format!("P{i:05}");
            let p = logistic(coef.logit(a0, &d.cov));
            // exponential event time with P(T <= 10) = p
            let rate = -(1.0 - p).ln() / HAZARD_HORIZON_YEARS;
            let t_event = if rate > 0.0 { -(1.0 - d.u_event).ln() / rate } else { f64::INFINITY };
            let followup = if d.censored {
                0.5 + d.censor_u * (HAZARD_HORIZON_YEARS - 0.5 - 1e-6)
            } else {
                HAZARD_HORIZON_YEARS + 0.5 + 4.5 * d.censor_u
            };
            let observed = t_event <= followup;
            let score = match cfg.external_score {
                ExternalScore::TrueProbability => p,
                ExternalScore::RiskFactorModel => logistic(
                    a0 + coef.a2 * d.cov.age_z + coef.a3 * d.cov.fall + coef.a4 * d.cov.smoking + 0.5 * d.score_noise,
                ),
            };
            let values = [
                d.age,
                d.bmi,
                d.categorical[0],
                d.categorical[1],
                d.categorical[2],
                d.categorical[3],
                d.categorical[4],
                d.abmd,
                score,
                d.tbs,
            ];
            let rf_values: BTreeMap<String, f64> = names
                .iter()
                .zip(values)
                .zip(&d.missing)
                .filter(|(_, &missing)| !missing)
                .map(|((n, v), _)| (n.clone(), v))
                .collect();
            records.push(PatientRecord {
                patient_id: id.clone(),
                rf_values,
                event_time_years: observed.then_some(t_event),
                event_observed: observed,
                followup_years: if observed { t_event } else { followup },
            });
            let (h, w) = match d.modality {
                Modality::Xray => (cfg.xray_dims.0, cfg.xray_dims.1 / 2),
                Modality::Ct => (cfg.ct_dims.1, cfg.ct_dims.2 / 2),
            };
            let half_truth = d
                .halves
                .iter()
                .zip([Side::Right, Side::Left])
                .map(|(hp, side)| HalfTruth {
                    side,
                    completeness: hp.completeness,
                    keypoints: hp.geometry.keypoints().iter().map(|&uv| to_pixels(uv, h, w)).collect(),
                    rim_width: hp.rim_width,
                })
                .collect();
            patients.push(PatientTruth {
                patient_id: id,
                covariates: d.cov,
                p,
                fracture_within_horizon: t_event <= HAZARD_HORIZON_YEARS,
                modality: d.modality,
                halves: half_truth,
                crop_row: d.layout.map(|l| l.phantom_row),
            });
            halves.push(d.halves);
            layouts.push(d.layout);
        }
        Ok(SyntheticCohort {
            config: cfg.clone(),
            schema,
            records,
            truth: GroundTruth { coefficients: coef, a0, patients },
            halves,
            layouts,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Render patient `i`'s acquisition. Deterministic in `(seed, i)`.
    pub fn render_study(&self, i: usize) -> ImageStudy {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.config.seed, &[i as u64, 1]));
        let [right, left] = &self.halves[i];
        let data = match self.layouts[i] {
            None => {
                let (h, w) = self.config.xray_dims;
                let r = render::render_xray_half(right, h, w / 2, &mut rng);
                let l = render::render_xray_half(left, h, w / 2, &mut rng);
                StudyData::Xray(render::compose_halves(&r, &l))
            }
            Some(layout) => StudyData::Ct(render::render_ct_volume(right, left, self.config.ct_dims, layout, &mut rng)),
        };
        ImageStudy { patient_id: self.records[i].patient_id.clone(), data }
    }

    pub fn half_params(&self, i: usize) -> &[HalfParams; 2] {
        &self.halves[i]
    }
}

/// Records, rendered studies and ground truth in one call.
pub fn generate_cohort(cfg: &GeneratorConfig) -> Result<(Vec<PatientRecord>, Vec<ImageStudy>, GroundTruth)> {
    let cohort = SyntheticCohort::generate(cfg)?;
    let studies = (0..cohort.len()).into_par_iter().map(|i| cohort.render_study(i)).collect();
    Ok((cohort.records, studies, cohort.truth))
}

/// Standalone X-ray half with the given class, for detector training.
pub fn render_training_half(q: f64, completeness: Completeness, size: (usize, usize), seed: u64) -> (Array2<f32>, Vec<[f64; 2]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hp = render::sample_half_params(q, completeness, &mut rng);
    let img = render::render_xray_half(&hp, size.0, size.1, &mut rng);
    let kps = hp.geometry.keypoints().iter().map(|&uv| to_pixels(uv, size.0, size.1)).collect();
    (img, kps)
}

/// A standalone CT study with known keypoints and phantom row.
#[derive(Debug, Clone)]
pub struct TrainingCt {
    pub study: ImageStudy,
    /// Per half (right, left), in half-image pixels.
    pub keypoints: [Vec<[f64; 2]>; 2],
    pub phantom_row: usize,
}

pub fn render_training_ct(q: f64, classes: [Completeness; 2], dims: (usize, usize, usize), seed: u64) -> TrainingCt {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hp = classes.map(|c| render::sample_half_params(q, c, &mut rng));
    let layout = CtLayout { phantom_row: dims.0 - rng.gen_range(8..=11), phantom_height: 4, table_height: 2 };
    let vol = render::render_ct_volume(&hp[0], &hp[1], dims, layout, &mut rng);
    let kps = |h: &HalfParams| h.geometry.keypoints().iter().map(|&uv| to_pixels(uv, dims.1, dims.2 / 2)).collect();
    TrainingCt {
        study: ImageStudy { patient_id: format!("ct-{seed}"), data: StudyData::Ct(vol) },
        keypoints: [kps(&hp[0]), kps(&hp[1])],
        phantom_row: layout.phantom_row,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorScope {
    ImageOnly,
    RfOnly,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesAuc {
    pub auc: f64,
    pub se: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// True conditional probability of a 10-year fracture given only the inputs
/// visible to `scope`; the other inputs are integrated out over the cohort's
/// empirical distribution.
pub fn scoped_probabilities(truth: &GroundTruth, scope: PredictorScope) -> Vec<f64> {
    let coef = truth.coefficients;
    let a0 = truth.a0;
    let covs: Vec<Covariates> = truth.patients.iter().map(|p| p.covariates).collect();
    match scope {
        PredictorScope::Both => covs.iter().map(|x| logistic(coef.logit(a0, x))).collect(),
        PredictorScope::ImageOnly => covs
            .par_iter()
            .map(|x| {
                covs.iter().map(|o| logistic(coef.logit(a0, &Covariates { q: x.q, ..*o }))).sum::<f64>() / covs.len() as f64
            })
            .collect(),
        PredictorScope::RfOnly => covs
            .par_iter()
            .map(|x| covs.iter().map(|o| logistic(coef.logit(a0, &Covariates { q: o.q, ..*x }))).sum::<f64>() / covs.len() as f64)
            .collect(),
    }
}

/// AUC of the scope-restricted true probability over labeled patients
/// (censored ones skipped), with a Hanley-McNeil standard error. This is the
/// ceiling for any learned model restricted to the same inputs.
pub fn bayes_auc(truth: &GroundTruth, labels: &[OutcomeLabel], scope: PredictorScope) -> Result<BayesAuc> {
    if labels.len() != truth.patients.len() {
        return Err(FormError::DimMismatch { expected: vec![truth.patients.len()], got: vec![labels.len()] });
    }
    let probs = scoped_probabilities(truth, scope);
    let (scores, y): (Vec<f64>, Vec<bool>) =
        probs.iter().zip(labels).filter(|(_, l)| l.is_labeled()).map(|(&p, l)| (p, l.is_positive())).unzip();
    if y.len() < 500 {
        return Err(FormError::Validation(format!("Bayes AUC needs >= 500 labeled patients, got {}", y.len())));
    }
    let auc = roc_auc(&scores, &y)?;
    let n_pos = y.iter().filter(|&&b| b).count();
    let n_neg = y.len() - n_pos;
    Ok(BayesAuc { auc, se: auc_standard_error(auc, n_pos, n_neg), n_pos, n_neg })
}
