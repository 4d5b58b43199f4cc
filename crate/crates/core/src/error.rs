use thiserror::Error;

pub type Result<T, E = FormError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FormError {
    /// Malformed input record, flag or configuration value.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// A risk factor required by the active schema group is absent; the
    /// patient is excluded rather than imputed.
    #[error("patient {patient_id} excluded: missing risk factor `{factor}`")]
    MissingRiskFactor { patient_id: String, factor: String },
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("numeric fault: {0}")]
    Numeric(String),
    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("model used before it was trained or run forward")]
    Untrained,
    #[error("Cox fit diverged after {iterations} iterations (monotone likelihood?): {detail}")]
    CoxDivergence { iterations: usize, detail: String },
    /// No phantom/table line was found in a CT volume.
    #[error("no calibration phantom found")]
    NoPhantomFound,
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

/// Coarse classification used by the command line front-end for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numeric,
    Io,
}

impl FormError {
    pub fn class(&self) -> ErrorClass {
        match self {
            FormError::Numeric(_) | FormError::CoxDivergence { .. } | FormError::RankDeficient(_) => {
                ErrorClass::Numeric
            }
            FormError::Io(_) | FormError::Csv(_) | FormError::Format(_) => ErrorClass::Io,
            _ => ErrorClass::Validation,
        }
    }
}
