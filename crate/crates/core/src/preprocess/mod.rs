//! Image preparation: phantom/table removal and coronal projection for CT,
//! intensity rescaling, hip-half splitting, keypoint detection, completeness
//! filtering and proximal-femur cropping.

mod dataset;
mod hough;
mod keypoints;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{FormError, Result};

pub use dataset::{
    preprocess_studies, read_crops, write_crops, CroppedHalf, Exclusion, ExclusionReason, PreprocessConfig,
    PreprocessOutput, StudyWarning,
};
pub use hough::{detect_phantom_crop, hough_lines, PhantomConfig};
pub use keypoints::{
    decode_heatmap, gaussian_heatmap, DetectorConfig, DetectorSample, DetectorTrainingMix, KeypointDetector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Xray,
    Ct,
}

/// Which preprocessing route a study takes; `Ctn` is CT with per-patient
/// intensity normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Xray,
    Ct,
    Ctn,
}

impl Route {
    pub fn modality(self) -> Modality {
        match self {
            Route::Xray => Modality::Xray,
            Route::Ct | Route::Ctn => Modality::Ct,
        }
    }
}

impl std::str::FromStr for Route {
    type Err = FormError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xray" => Ok(Route::Xray),
            "ct" => Ok(Route::Ct),
            "ctn" => Ok(Route::Ctn),
            other => Err(FormError::Validation(format!("unknown modality `{other}` (expected xray, ct or ctn)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Right,
    Left,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Right => "right",
            Side::Left => "left",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = FormError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "right" => Ok(Side::Right),
            "left" => Ok(Side::Left),
            other => Err(FormError::Format(format!("unknown side `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Completeness {
    Complete,
    Incomplete,
    Implant,
}

impl Completeness {
    pub const ALL: [Completeness; 3] = [Completeness::Complete, Completeness::Incomplete, Completeness::Implant];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StudyData {
    /// Radiograph `(height, width)` showing both hips.
    Xray(Array2<f32>),
    /// Axial stack `(depth, height, width)`, depth anterior to posterior.
    Ct(Array3<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageStudy {
    pub patient_id: String,
    pub data: StudyData,
}

impl ImageStudy {
    pub fn modality(&self) -> Modality {
        match self.data {
            StudyData::Xray(_) => Modality::Xray,
            StudyData::Ct(_) => Modality::Ct,
        }
    }
}

pub const N_KEYPOINTS: usize = 12;

/// Keypoint indices bounding the proximal-femur crop: head apex, greater
/// trochanter tip, lesser trochanter tip and the two shaft points.
pub const CROP_KEYPOINTS: [usize; 5] = [0, 6, 8, 10, 11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyPointSet {
    /// `(row, col)` in half-image pixels.
    pub points: Vec<[f64; 2]>,
    pub completeness: Completeness,
    /// Predicted probability of `completeness`.
    pub confidence: f64,
    /// Probability of the `Complete` class (equals `confidence` when the
    /// predicted class is `Complete`).
    pub complete_probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Max,
}

/// Non-fatal conditions worth logging next to a processed study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warning {
    NoPhantomFound,
    ConstantImage,
}

/// Collapse the anterior-posterior axis of a `(depth, height, width)` volume.
pub fn project_coronal(volume: &Array3<f32>, agg: Aggregation) -> Result<Array2<f32>> {
    if volume.is_empty() {
        return Err(FormError::Validation("cannot project an empty volume".into()));
    }
    Ok(match agg {
        Aggregation::Mean => volume.mean_axis(Axis(0)).expect("nonempty axis"),
        Aggregation::Max => volume.fold_axis(Axis(0), f32::NEG_INFINITY, |&a, &b| a.max(b)),
    })
}

/// Remove all depth rows at and below the phantom. When no phantom is found
/// the volume passes through with a warning.
pub fn remove_phantom(volume: &Array3<f32>, cfg: &PhantomConfig) -> (Array3<f32>, Option<Warning>) {
    match detect_phantom_crop(volume, cfg) {
        Ok(row) => (volume.slice(s![..row, .., ..]).to_owned(), None),
        Err(_) => {
            log::warn!("no phantom found; volume left uncropped");
            (volume.clone(), Some(Warning::NoPhantomFound))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    /// Divide by a fixed constant, then clamp to `[0, 1]`.
    Global(f32),
    /// Map the image's own `[min, max]` onto `[0, 1]`.
    PerPatient,
}

/// Default divisor for CT projections (synthetic scanner units).
pub const CT_GLOBAL_SCALE: f32 = 1500.0;

impl RescaleMode {
    pub fn for_route(route: Route) -> Option<Self> {
        match route {
            Route::Xray => None,
            Route::Ct => Some(RescaleMode::Global(CT_GLOBAL_SCALE)),
            Route::Ctn => Some(RescaleMode::PerPatient),
        }
    }
}

pub fn rescale(image: &Array2<f32>, mode: RescaleMode) -> Result<(Array2<f32>, Option<Warning>)> {
    if image.is_empty() {
        return Err(FormError::Validation("cannot rescale an empty image".into()));
    }
    match mode {
        RescaleMode::Global(c) => {
            if !(c > 0.0 && c.is_finite()) {
                return Err(FormError::Config(format!("rescale constant must be positive, got {c}")));
            }
            Ok((image.mapv(|v| (v / c).clamp(0.0, 1.0)), None))
        }
        RescaleMode::PerPatient => {
            let lo = image.fold(f32::INFINITY, |a, &b| a.min(b));
            let hi = image.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            if hi <= lo {
                log::warn!("constant image; per-patient rescale yields zeros");
                return Ok((Array2::zeros(image.dim()), Some(Warning::ConstantImage)));
            }
            Ok((image.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)), None))
        }
    }
}

/// Split at the vertical midline into `(right, left)`; the left half is
/// mirrored so both show the hip in the same orientation. An odd center
/// column is dropped.
pub fn split_halves(image: &Array2<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
    let w = image.ncols();
    if w < 2 {
        return Err(FormError::Validation(format!("image width {w} too small to split")));
    }
    let half = w / 2;
    let right = image.slice(s![.., ..half]).to_owned();
    let left = image.slice(s![.., w - half..;-1]).to_owned();
    Ok((right, left))
}

/// Mirror columns; applying it twice is the identity.
pub fn flip_horizontal(image: &Array2<f32>) -> Array2<f32> {
    image.slice(s![.., ..;-1]).to_owned()
}

/// Bilinear sample at `(row, col)` with zero outside the image.
pub fn sample_bilinear(img: ArrayView2<f32>, r: f64, c: f64) -> f32 {
    let (h, w) = img.dim();
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = (r - r0) as f32;
    let fc = (c - c0) as f32;
    let at = |i: f64, j: f64| -> f32 {
        if i < 0.0 || j < 0.0 || i >= h as f64 || j >= w as f64 {
            0.0
        } else {
            img[[i as usize, j as usize]]
        }
    };
    let top = at(r0, c0) * (1.0 - fc) + at(r0, c0 + 1.0) * fc;
    let bottom = at(r0 + 1.0, c0) * (1.0 - fc) + at(r0 + 1.0, c0 + 1.0) * fc;
    top * (1.0 - fr) + bottom * fr
}

/// Resample the window `[r0, r1) x [c0, c1)` (in pixel-edge coordinates) to
/// `out` pixels; pixel centers map linearly, zero outside the source.
pub fn resample_window(img: ArrayView2<f32>, window: [f64; 4], out: (usize, usize)) -> Array2<f32> {
    let [r0, r1, c0, c1] = window;
    let sr = (r1 - r0) / out.0 as f64;
    let sc = (c1 - c0) / out.1 as f64;
    Array2::from_shape_fn(out, |(i, j)| {
        let r = r0 + (i as f64 + 0.5) * sr - 0.5;
        let c = c0 + (j as f64 + 0.5) * sc - 0.5;
        sample_bilinear(img, r, c)
    })
}

/// Whole-image bilinear resize.
pub fn resize(img: &Array2<f32>, out: (usize, usize)) -> Array2<f32> {
    let (h, w) = img.dim();
    if (h, w) == out {
        return img.clone();
    }
    // clamp to the border so edges are not darkened by the zero padding
    let clamped = |r: f64, c: f64| sample_bilinear(img.view(), r.clamp(0.0, (h - 1) as f64), c.clamp(0.0, (w - 1) as f64));
    let sr = h as f64 / out.0 as f64;
    let sc = w as f64 / out.1 as f64;
    Array2::from_shape_fn(out, |(i, j)| clamped((i as f64 + 0.5) * sr - 0.5, (j as f64 + 0.5) * sc - 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterDecision {
    Include,
    Exclude,
}

pub fn completeness_threshold(modality: Modality) -> f64 {
    match modality {
        Modality::Xray => 0.01,
        Modality::Ct => 0.2,
    }
}

/// Keep a half only if it is predicted `Complete` with confidence strictly
/// above the modality threshold.
pub fn completeness_filter(kps: &KeyPointSet, modality: Modality) -> FilterDecision {
    completeness_filter_at(kps, completeness_threshold(modality))
}

pub fn completeness_filter_at(kps: &KeyPointSet, threshold: f64) -> FilterDecision {
    if kps.completeness == Completeness::Complete && kps.confidence > threshold {
        FilterDecision::Include
    } else {
        FilterDecision::Exclude
    }
}

pub fn crop_dims(modality: Modality) -> (usize, usize) {
    match modality {
        Modality::Ct => (96, 96),
        Modality::Xray => (224, 224),
    }
}

/// Square crop window `[r0, r1, c0, c1]` around the crop keypoints, padded
/// by `pad` of the box extent on every side.
pub fn crop_window(points: &[[f64; 2]], pad: f64) -> Result<[f64; 4]> {
    if points.len() != N_KEYPOINTS {
        return Err(FormError::DimMismatch { expected: vec![N_KEYPOINTS], got: vec![points.len()] });
    }
    let sel = CROP_KEYPOINTS.map(|i| points[i]);
    let rmin = sel.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let rmax = sel.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let cmin = sel.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let cmax = sel.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let (hh, ww) = (rmax - rmin, cmax - cmin);
    if !(hh > 0.0 && ww > 0.0) {
        return Err(FormError::Validation("degenerate keypoint bounding box".into()));
    }
    let side = (hh * (1.0 + 2.0 * pad)).max(ww * (1.0 + 2.0 * pad));
    let (rc, cc) = ((rmin + rmax) / 2.0 + 0.5, (cmin + cmax) / 2.0 + 0.5);
    Ok([rc - side / 2.0, rc + side / 2.0, cc - side / 2.0, cc + side / 2.0])
}

pub const CROP_PADDING: f64 = 0.15;

/// Crop the proximal femur and resample it to `target`.
pub fn crop_femur(half: &Array2<f32>, kps: &KeyPointSet, target: (usize, usize)) -> Result<Array2<f32>> {
    let window = crop_window(&kps.points, CROP_PADDING)?;
    Ok(resample_window(half.view(), window, target))
}

/// Everything the per-study route produces before keypoint detection.
#[derive(Debug, Clone)]
pub struct PreparedStudy {
    pub halves: [(Side, Array2<f32>); 2],
    pub warnings: Vec<Warning>,
}

/// Route-specific steps up to and including the half split.
pub fn prepare_study(study: &ImageStudy, route: Route, phantom: &PhantomConfig) -> Result<PreparedStudy> {
    let mut warnings = Vec::new();
    let image = match (&study.data, route) {
        (StudyData::Xray(img), Route::Xray) => img.clone(),
        (StudyData::Ct(vol), Route::Ct | Route::Ctn) => {
            let (cropped, w) = remove_phantom(vol, phantom);
            warnings.extend(w);
            let proj = project_coronal(&cropped, Aggregation::Mean)?;
            let (img, w) = rescale(&proj, RescaleMode::for_route(route).expect("CT route"))?;
            warnings.extend(w);
            img
        }
        (data, route) => {
            let kind = if matches!(data, StudyData::Xray(_)) { "X-ray" } else { "CT" };
            return Err(FormError::Validation(format!(
                "patient {}: {kind} study cannot take the {route:?} route",
                study.patient_id
            )));
        }
    };
    let (right, left) = split_halves(&image)?;
    Ok(PreparedStudy { halves: [(Side::Right, right), (Side::Left, left)], warnings })
}
