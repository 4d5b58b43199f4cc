//! Opportunistic hip-fracture risk estimation from radiographs and CT
//! projections, with survival baselines and a cross-validation harness.

pub mod baselines;
pub mod cohort;
mod error;
pub mod evalharness;
pub mod extractor;
pub mod fgrid;
pub mod nncore;
pub mod preprocess;
pub mod risk;
pub mod seeds;
pub mod synthgen;

pub use error::{ErrorClass, FormError, Result};
