use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SyntheticCohort;
use crate::cohort::{save_manifest, RiskFactorSchema};
use crate::preprocess::{ImageStudy, Modality, StudyData};
use crate::{fgrid, FormError, Result};

/// One row of `images.csv`. Raw acquisitions show both hips (`side = both`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageIndexRow {
    pub patient_id: String,
    pub modality: Modality,
    pub side: String,
    /// Relative to the dataset directory.
    pub path: String,
}

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub root: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetPaths { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.csv")
    }

    pub fn schema(&self) -> PathBuf {
        self.root.join("schema.toml")
    }

    pub fn images(&self) -> PathBuf {
        self.root.join("images.csv")
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("ground_truth.json")
    }

    pub fn generator_config(&self) -> PathBuf {
        self.root.join("generator.toml")
    }

    pub fn read_schema(&self) -> Result<RiskFactorSchema> {
        RiskFactorSchema::from_toml(&fs::read_to_string(self.schema())?)
    }

    pub fn read_index(&self) -> Result<Vec<ImageIndexRow>> {
        let mut rd = csv::Reader::from_path(self.images())?;
        rd.deserialize().map(|r| r.map_err(FormError::from)).collect()
    }

    pub fn load_study(&self, row: &ImageIndexRow) -> Result<ImageStudy> {
        let grid = fgrid::load(&self.root.join(&row.path))?;
        let data = match (row.modality, grid.ndim()) {
            (Modality::Xray, 2) => StudyData::Xray(grid.into_dimensionality().expect("2-D grid")),
            (Modality::Ct, 3) => StudyData::Ct(grid.into_dimensionality().expect("3-D grid")),
            (m, n) => return Err(FormError::Format(format!("{}: {m:?} study stored as {n}-D grid", row.path))),
        };
        Ok(ImageStudy { patient_id: row.patient_id.clone(), data })
    }
}

/// Write manifest, schema, image index, one FGRID file per study and the
/// ground-truth JSON. Output bytes depend only on the generator config.
pub fn write_dataset(cohort: &SyntheticCohort, root: &Path) -> Result<DatasetPaths> {
    let paths = DatasetPaths::new(root);
    fs::create_dir_all(root.join("images"))?;
    save_manifest(&paths.manifest(), &cohort.schema, &cohort.records)?;
    fs::write(paths.schema(), cohort.schema.to_toml())?;
    fs::write(
        paths.generator_config(),
        toml::to_string(&cohort.config).map_err(|e| FormError::Format(e.to_string()))?,
    )?;
    let rows: Vec<ImageIndexRow> = (0..cohort.len())
        .into_par_iter()
        .map(|i| -> Result<ImageIndexRow> {
            let study = cohort.render_study(i);
            let rel = format!("images/{}.fgrd", study.patient_id);
            let bytes = match &study.data {
                StudyData::Xray(img) => fgrid::encode_2d(img),
                StudyData::Ct(vol) => fgrid::encode_3d(vol),
            };
            fs::write(root.join(&rel), bytes)?;
            Ok(ImageIndexRow { patient_id: study.patient_id.clone(), modality: study.modality(), side: "both".into(), path: rel })
        })
        .collect::<Result<_>>()?;
    let mut wr = csv::Writer::from_path(paths.images())?;
    for r in &rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    fs::write(paths.ground_truth(), serde_json::to_vec_pretty(&cohort.truth)?)?;
    Ok(paths)
}
