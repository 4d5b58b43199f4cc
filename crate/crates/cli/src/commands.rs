use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::{Args, ValueEnum};
use form::cohort::{encode_risk_factors, load_manifest, RfGroup};
use form::evalharness::{run_protocol, write_report, ModelSpec, ProtocolConfig, ProtocolData, ProtocolMode};
use form::preprocess::{
    preprocess_studies, read_crops, write_crops, DetectorConfig, DetectorTrainingMix, Exclusion, ExclusionReason,
    KeypointDetector, PreprocessConfig, PreprocessOutput, Route,
};
use form::risk::RiskInputs;
use form::synthgen::{write_dataset, DatasetPaths, GeneratorConfig, SyntheticCohort};
use form::FormError;
use serde::Serialize;

/// Studies held in memory at once during preprocessing.
const STUDY_CHUNK: usize = 64;

pub struct Context {
    pub workdir: PathBuf,
    pub jobs: Option<usize>,
}

impl Context {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v = toml::from_str(&text).map_err(FormError::from).with_context(|| format!("parsing {}", path.display()))?;
    Ok(v)
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| FormError::Format(e.to_string()))?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_dataset(paths: &DatasetPaths) -> Result<(form::cohort::RiskFactorSchema, Vec<form::cohort::PatientRecord>)> {
    let schema = paths.read_schema().with_context(|| format!("reading dataset schema in {}", paths.root.display()))?;
    let records = load_manifest(&paths.manifest(), &schema)
        .with_context(|| format!("reading {}", paths.manifest().display()))?;
    Ok((schema, records))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator configuration (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prevalence: Option<f64>,
    /// Fraction of patients imaged by CT.
    #[arg(long)]
    ct_fraction: Option<f64>,
}

pub fn synth(ctx: &Context, a: SynthArgs) -> Result<()> {
    let mut cfg: GeneratorConfig = match &a.config {
        Some(p) => read_toml(&ctx.path(p))?,
        None => GeneratorConfig::default(),
    };
    if let Some(n) = a.n {
        cfg.n_patients = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.prevalence {
        cfg.target_prevalence = p;
    }
    if let Some(f) = a.ct_fraction {
        cfg.ct_fraction = f;
    }
    let cohort = SyntheticCohort::generate(&cfg)?;
    let out = ctx.path(&a.out);
    write_dataset(&cohort, &out)?;
    let events = cohort.truth.patients.iter().filter(|p| p.fracture_within_horizon).count();
    log::info!(
        "wrote {} patients to {} ({} fractures within 10 years, intercept {:.4})",
        cohort.len(),
        out.display(),
        events,
        cohort.truth.a0
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Dataset directory written by `synth` (or laid out the same way).
    #[arg(long)]
    dataset: PathBuf,
    /// xray, ct, or ctn (CT with per-patient intensity scaling).
    #[arg(long)]
    modality: Route,
    #[arg(long)]
    out: PathBuf,
    /// Trained keypoint detector; one is trained and saved to the output
    /// directory when omitted.
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Preprocessing configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Group whose risk factors must be present for a patient to be kept.
    #[arg(long, default_value = "base")]
    rf_group: RfGroup,
    /// Seed for detector training.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_or_train_detector(ctx: &Context, a: &PreprocessArgs, out: &Path) -> Result<KeypointDetector> {
    if let Some(p) = &a.detector {
        let p = ctx.path(p);
        let bytes = fs::read(&p).with_context(|| format!("reading detector {}", p.display()))?;
        return Ok(KeypointDetector::from_bytes(&bytes)?);
    }
    let cfg = DetectorConfig { seed: a.seed, ..DetectorConfig::default() };
    let mix = DetectorTrainingMix { seed: a.seed, ..DetectorTrainingMix::default() };
    log::info!("training keypoint detector on {} synthetic halves", 2 * (mix.n_xray + 2 * mix.n_ct) + mix.n_noise);
    let samples = mix.generate(cfg.input_size)?;
    let (det, report) = KeypointDetector::train(&samples, &cfg)?;
    log::info!("detector trained: {report:?}");
    fs::write(out.join("detector.bin"), det.to_bytes()?)?;
    Ok(det)
}

pub fn preprocess(ctx: &Context, a: PreprocessArgs) -> Result<()> {
    let paths = DatasetPaths::new(ctx.path(&a.dataset));
    let out = ctx.path(&a.out);
    fs::create_dir_all(&out)?;
    let pcfg: PreprocessConfig = match &a.config {
        Some(p) => read_toml(&ctx.path(p))?,
        None => PreprocessConfig::default(),
    };
    let (schema, records) = load_dataset(&paths)?;
    let rows: Vec<_> = paths.read_index()?.into_iter().filter(|r| r.modality == a.modality.modality()).collect();
    if rows.is_empty() {
        bail!(FormError::Validation(format!("no {:?} studies in {}", a.modality.modality(), paths.root.display())));
    }
    let detector = load_or_train_detector(ctx, &a, &out)?;

    let mut all = PreprocessOutput::default();
    for chunk in rows.chunks(STUDY_CHUNK) {
        let studies = chunk.iter().map(|r| paths.load_study(r)).collect::<form::Result<Vec<_>>>()?;
        let part = preprocess_studies(&studies, a.modality, &detector, &pcfg)?;
        all.halves.extend(part.halves);
        all.exclusions.extend(part.exclusions);
        all.warnings.extend(part.warnings);
    }
    let imaged: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.patient_id.as_str()).collect();
    for r in records.iter().filter(|r| imaged.contains(r.patient_id.as_str())) {
        if let Err(FormError::MissingRiskFactor { factor, .. }) = encode_risk_factors(r, &schema, a.rf_group) {
            all.exclusions.push(Exclusion {
                patient_id: r.patient_id.clone(),
                side: String::new(),
                reason: ExclusionReason::MissingRf,
                detail: format!("missing `{factor}`"),
            });
        }
    }
    write_crops(&out, &all)?;
    write_toml(&out.join("preprocess.toml"), &pcfg)?;
    let count = |reason| all.exclusions.iter().filter(|e| e.reason == reason).count();
    log::info!(
        "{} halves kept; excluded: {} implant, {} incomplete, {} low confidence, {} patients missing risk factors",
        all.halves.len(),
        count(ExclusionReason::Implant),
        count(ExclusionReason::Incomplete),
        count(ExclusionReason::LowConfidence),
        count(ExclusionReason::MissingRf)
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Form,
    Cox,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    /// Small networks and short schedules for a single CPU.
    Desk,
    /// Full-size networks: 2048 GAP features, 50 epochs at learning rate 1e-4.
    Full,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output of `preprocess`; required when the model uses images.
    #[arg(long)]
    crops: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: ModelKind,
    /// image, rf or both (form and cox only).
    #[arg(long)]
    inputs: Option<RiskInputs>,
    /// Manifest column holding the external score.
    #[arg(long, default_value = "frax")]
    column: String,
    #[arg(long)]
    rf_group: Option<RfGroup>,
    #[arg(long, value_parser = parse_horizon)]
    horizon: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate only this fold across repetitions.
    #[arg(long)]
    ablation_fold: Option<usize>,
    /// Protocol configuration (TOML); replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Run directory; defaults to `runs/<model>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_horizon(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(h) if h == 5.0 || h == 10.0 => Ok(h),
        _ => Err(format!("horizon must be 5 or 10 years, got `{s}`")),
    }
}

#[derive(Debug, Serialize)]
struct RunSnapshot<'a> {
    model: String,
    dataset: String,
    crops: Option<String>,
    preset: Option<Preset>,
    protocol: &'a ProtocolConfig,
}

fn model_spec(a: &RunArgs) -> Result<ModelSpec> {
    Ok(match a.model {
        ModelKind::Form => ModelSpec::Form { inputs: a.inputs.unwrap_or(RiskInputs::Both) },
        ModelKind::Cox => ModelSpec::Cox { inputs: a.inputs.unwrap_or(RiskInputs::Both) },
        ModelKind::External => {
            if a.inputs.is_some() {
                bail!(FormError::Validation("--inputs does not apply to the external model".into()));
            }
            ModelSpec::External { column: a.column.clone() }
        }
    })
}

pub fn run(ctx: &Context, a: RunArgs) -> Result<()> {
    let spec = model_spec(&a)?;
    let mut cfg: ProtocolConfig = match (&a.config, a.preset) {
        (Some(p), _) => read_toml(&ctx.path(p))?,
        (None, Preset::Desk) => ProtocolConfig::desk_scale(),
        (None, Preset::Full) => ProtocolConfig::default(),
    };
    if let Some(g) = a.rf_group {
        cfg.rf_group = g;
    }
    if let Some(h) = a.horizon {
        cfg.horizon_years = h;
    }
    if let Some(k) = a.folds {
        cfg.k = k;
    }
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.ablation_fold {
        cfg.mode = ProtocolMode::Ablation { fold: f };
    }
    if ctx.jobs.is_some() {
        cfg.jobs = ctx.jobs;
    }
    cfg.validate()?;

    let uses_images = matches!(spec, ModelSpec::Form { inputs } | ModelSpec::Cox { inputs } if inputs.uses_image());
    let crops = match (&a.crops, uses_images) {
        (Some(c), _) => Some(ctx.path(c)),
        (None, true) => bail!(FormError::Validation(format!("{} uses image features but --crops was not given", spec.name()))),
        (None, false) => None,
    };
    let paths = DatasetPaths::new(ctx.path(&a.dataset));
    let (schema, records) = load_dataset(&paths)?;
    let halves = match (&crops, uses_images) {
        (Some(c), true) => read_crops(c)?,
        _ => Vec::new(),
    };

    let out = match &a.out {
        Some(o) => ctx.path(o),
        None => ctx.workdir.join("runs").join(format!("{}-seed{}", spec.name(), cfg.seed)),
    };
    fs::create_dir_all(&out)?;
    crate::logging::attach_file(&out.join("run.log"))?;
    let snapshot = RunSnapshot {
        model: spec.name(),
        dataset: paths.root.display().to_string(),
        crops: crops.as_ref().map(|c| c.display().to_string()),
        preset: a.config.is_none().then_some(a.preset),
        protocol: &cfg,
    };
    write_toml(&out.join("config.toml"), &snapshot)?;

    log::info!("{}: {} patients, {} image halves, k = {}, reps = {}", spec.name(), records.len(), halves.len(), cfg.k, cfg.reps);
    let data = ProtocolData { schema: &schema, records: &records, halves: &halves };
    let result = run_protocol(data, std::slice::from_ref(&spec), &cfg)?;
    for w in &result.report.warnings {
        log::warn!("{w}");
    }
    write_report(&out, &result)?;
    let m = &result.report.models[0];
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    log::info!(
        "{}: mean AUC {} (STD across folds {}, SE across repetitions {}); report in {}",
        m.name,
        fmt(m.mean_auc),
        fmt(m.std_across_folds),
        fmt(m.se_across_reps),
        out.display()
    );
    if let Some(fp) = &m.censored_fp {
        log::info!(
            "false-positive rate at {}: censored subgroup {:.4} ± {:.4} (n = {}), validation negatives {:.4} ± {:.4} (n = {})",
            fp.threshold,
            fp.censored_subgroup.mean,
            fp.censored_subgroup.se,
            fp.censored_subgroup.n,
            fp.validation_negatives.mean,
            fp.validation_negatives.se,
            fp.validation_negatives.n
        );
    }
    Ok(())
}
