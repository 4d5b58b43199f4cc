//! Whole-dataset preprocessing: every study through its route, the detector,
//! the completeness filter and the crop, with a log of dropped halves.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    completeness_filter_at, crop_dims, crop_femur, prepare_study, Completeness, FilterDecision, ImageStudy,
    KeyPointSet, KeypointDetector, PhantomConfig, Route, Side, Warning,
};
use crate::{fgrid, FormError, Result};

#[derive(Debug, Clone)]
pub struct CroppedHalf {
    pub patient_id: String,
    pub side: Side,
    pub image: Array2<f32>,
    pub keypoints: KeyPointSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    Implant,
    Incomplete,
    LowConfidence,
    MissingRf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub patient_id: String,
    /// Empty for patient-level exclusions.
    pub side: String,
    pub reason: ExclusionReason,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyWarning {
    pub patient_id: String,
    pub warning: Warning,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub phantom: PhantomConfig,
    /// Minimum `Complete` confidence; `None` uses the modality default.
    pub confidence_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct PreprocessOutput {
    pub halves: Vec<CroppedHalf>,
    pub exclusions: Vec<Exclusion>,
    pub warnings: Vec<StudyWarning>,
}

fn exclusion_reason(k: &KeyPointSet) -> ExclusionReason {
    match k.completeness {
        Completeness::Implant => ExclusionReason::Implant,
        Completeness::Incomplete => ExclusionReason::Incomplete,
        Completeness::Complete => ExclusionReason::LowConfidence,
    }
}

/// Run `studies` through `route`; output order follows the input (right half
/// before left).
pub fn preprocess_studies(
    studies: &[ImageStudy],
    route: Route,
    detector: &KeypointDetector,
    cfg: &PreprocessConfig,
) -> Result<PreprocessOutput> {
    let threshold = cfg.confidence_threshold.unwrap_or_else(|| super::completeness_threshold(route.modality()));
    let target = crop_dims(route.modality());
    let per_study: Vec<Result<PreprocessOutput>> = studies
        .par_iter()
        .map(|study| {
            let prep = prepare_study(study, route, &cfg.phantom)?;
            let refs: Vec<&Array2<f32>> = prep.halves.iter().map(|(_, h)| h).collect();
            let kps = detector.detect_batch(&refs)?;
            let mut out = PreprocessOutput::default();
            out.warnings.extend(
                prep.warnings.iter().map(|&w| StudyWarning { patient_id: study.patient_id.clone(), warning: w }),
            );
            for ((side, half), k) in prep.halves.iter().zip(kps) {
                match completeness_filter_at(&k, threshold) {
                    FilterDecision::Include => out.halves.push(CroppedHalf {
                        patient_id: study.patient_id.clone(),
                        side: *side,
                        image: crop_femur(half, &k, target)?,
                        keypoints: k,
                    }),
                    FilterDecision::Exclude => out.exclusions.push(Exclusion {
                        patient_id: study.patient_id.clone(),
                        side: side.as_str().into(),
                        reason: exclusion_reason(&k),
                        detail: format!("{:?} with confidence {:.4}", k.completeness, k.confidence),
                    }),
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = PreprocessOutput::default();
    for r in per_study {
        let r = r?;
        all.halves.extend(r.halves);
        all.exclusions.extend(r.exclusions);
        all.warnings.extend(r.warnings);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CropIndexRow {
    patient_id: String,
    side: Side,
    path: String,
    completeness_confidence: f64,
}

/// `crops.csv` + `crops/{patient}_{side}.fgrd`, `exclusions.csv`,
/// `warnings.csv`.
pub fn write_crops(dir: &Path, out: &PreprocessOutput) -> Result<()> {
    fs::create_dir_all(dir.join("crops"))?;
    let mut idx = csv::Writer::from_path(dir.join("crops.csv"))?;
    for h in &out.halves {
        let rel = format!("crops/{}_{}.fgrd", h.patient_id, h.side.as_str());
        fgrid::save_2d(&dir.join(&rel), &h.image)?;
        idx.serialize(CropIndexRow {
            patient_id: h.patient_id.clone(),
            side: h.side,
            path: rel,
            completeness_confidence: h.keypoints.confidence,
        })?;
    }
    idx.flush()?;
    let mut ex = csv::Writer::from_path(dir.join("exclusions.csv"))?;
    for e in &out.exclusions {
        ex.serialize(e)?;
    }
    ex.flush()?;
    let mut wr = csv::Writer::from_path(dir.join("warnings.csv"))?;
    for w in &out.warnings {
        wr.serialize(w)?;
    }
    wr.flush()?;
    Ok(())
}

/// Load the crops written by [`write_crops`]; keypoints are not persisted,
/// only the completeness confidence.
pub fn read_crops(dir: &Path) -> Result<Vec<CroppedHalf>> {
    let mut rd = csv::Reader::from_path(dir.join("crops.csv"))?;
    let mut out = Vec::new();
    for row in rd.deserialize::<CropIndexRow>() {
        let row = row?;
        let image = fgrid::load(&dir.join(&row.path))?
            .into_dimensionality()
            .map_err(|_| FormError::Format(format!("{}: crop is not 2-D", row.path)))?;
        out.push(CroppedHalf {
            patient_id: row.patient_id,
            side: row.side,
            image,
            keypoints: KeyPointSet {
                points: Vec::new(),
                completeness: Completeness::Complete,
                confidence: row.completeness_confidence,
                complete_probability: row.completeness_confidence,
            },
        });
    }
    Ok(out)
}
