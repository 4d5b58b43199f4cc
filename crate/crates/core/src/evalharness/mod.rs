//! Cross-validation protocol: stratified patient-level folds, repeated
//! training, AUC, Welch tests, censored-subgroup false positives and reports.

mod auc;
mod folds;
mod protocol;
mod stats;

pub use auc::{auc_standard_error, roc_auc, roc_curve, RocPoint};
pub use folds::{kfold_split, FoldAssignment};
pub use protocol::{
    censored_subgroup_fp, run_protocol, write_report, EvaluationReport, FoldAuc, FpRate, FpReport, ModelReport,
    ModelSpec, ProtocolConfig, ProtocolData, ProtocolMode, ProtocolOutput, WelchComparison,
};
pub use stats::{mean, std_dev, variance, welch_test, WelchResult};
