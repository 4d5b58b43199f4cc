//! Parametric proximal-femur phantom rendered into X-ray-like images and CT
//! volumes.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::preprocess::Completeness;

pub const N_KEYPOINTS: usize = 12;

type P = [f64; 2];

/// Femur landmarks in normalized half-image coordinates `(u, v)`:
/// `u` grows from lateral (0) to medial (1), `v` from top to bottom.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FemurGeometry {
    pub head_center: P,
    pub head_radius: f64,
    pub neck_base: P,
    pub neck_half_width: f64,
    pub gt_center: P,
    pub gt_radius: f64,
    pub lt_center: P,
    pub lt_radius: f64,
    pub shaft_top: P,
    pub shaft_bottom: P,
    pub shaft_half_width: f64,
}

fn add(a: P, b: P) -> P {
    [a[0] + b[0], a[1] + b[1]]
}

fn sub(a: P, b: P) -> P {
    [a[0] - b[0], a[1] - b[1]]
}

fn scale(a: P, s: f64) -> P {
    [a[0] * s, a[1] * s]
}

fn norm(a: P) -> f64 {
    a[0].hypot(a[1])
}

fn lerp(a: P, b: P, t: f64) -> P {
    add(a, scale(sub(b, a), t))
}

impl FemurGeometry {
    pub fn template() -> Self {
        FemurGeometry {
            head_center: [0.62, 0.30],
            head_radius: 0.085,
            neck_base: [0.45, 0.45],
            neck_half_width: 0.05,
            gt_center: [0.33, 0.38],
            gt_radius: 0.07,
            lt_center: [0.50, 0.58],
            lt_radius: 0.032,
            shaft_top: [0.40, 0.45],
            shaft_bottom: [0.43, 1.05],
            shaft_half_width: 0.075,
        }
    }

    /// Similarity transform about the half-image center.
    pub fn transformed(&self, s: f64, angle: f64, shift: P) -> Self {
        let (sin, cos) = angle.sin_cos();
        let c = [0.5, 0.5];
        let tp = |p: P| {
            let d = sub(p, c);
            add(add(c, scale([cos * d[0] - sin * d[1], sin * d[0] + cos * d[1]], s)), shift)
        };
        FemurGeometry {
            head_center: tp(self.head_center),
            head_radius: self.head_radius * s,
            neck_base: tp(self.neck_base),
            neck_half_width: self.neck_half_width * s,
            gt_center: tp(self.gt_center),
            gt_radius: self.gt_radius * s,
            lt_center: tp(self.lt_center),
            lt_radius: self.lt_radius * s,
            shaft_top: tp(self.shaft_top),
            shaft_bottom: tp(self.shaft_bottom),
            shaft_half_width: self.shaft_half_width * s,
        }
    }

    fn shaft_point(&self, v: f64, side: f64) -> P {
        let axis = sub(self.shaft_bottom, self.shaft_top);
        let t = (v - self.shaft_top[1]) / axis[1];
        let on_axis = lerp(self.shaft_top, self.shaft_bottom, t);
        let n = scale([axis[1], -axis[0]], 1.0 / norm(axis));
        add(on_axis, scale(n, side * self.shaft_half_width))
    }

    /// The twelve landmarks, normalized `(u, v)`:
    /// 0 head apex, 1 head center, 2 head medial, 3 head inferior,
    /// 4/5 neck superior/inferior midpoints, 6 greater-trochanter tip,
    /// 7 greater-trochanter lateral, 8 lesser-trochanter tip,
    /// 9 intertrochanteric midpoint, 10/11 shaft medial/lateral.
    pub fn keypoints(&self) -> [P; N_KEYPOINTS] {
        let r = self.head_radius;
        let c = self.head_center;
        let mid = lerp(c, self.neck_base, 0.5);
        let axis = sub(self.neck_base, c);
        let up = scale([axis[1], -axis[0]], 1.0 / norm(axis));
        let up = if up[1] > 0.0 { scale(up, -1.0) } else { up };
        let shaft_v = self.shaft_top[1] + 0.35 * (self.shaft_bottom[1] - self.shaft_top[1]);
        [
            add(c, [0.0, -r]),
            c,
            add(c, [r, 0.0]),
            add(c, [0.0, r]),
            add(mid, scale(up, self.neck_half_width)),
            add(mid, scale(up, -self.neck_half_width)),
            add(self.gt_center, [0.0, -self.gt_radius]),
            add(self.gt_center, [-self.gt_radius, 0.0]),
            add(self.lt_center, [self.lt_radius, 0.0]),
            lerp(self.gt_center, self.lt_center, 0.5),
            self.shaft_point(shaft_v, 1.0),
            self.shaft_point(shaft_v, -1.0),
        ]
    }
}

/// Per-half rendering parameters drawn by the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HalfParams {
    pub geometry: FemurGeometry,
    pub completeness: Completeness,
    /// Cortical rim width as a fraction of the half height.
    pub rim_width: f64,
    pub rim_intensity: f64,
    pub trabecular_intensity: f64,
    /// Row fraction below which an incomplete image is blanked.
    pub cut_v: f64,
    pub texture_phase: [f64; 3],
}

/// Rim width law: linear in bone quality, clipped to a renderable range.
pub fn rim_width_for(q: f64) -> f64 {
    (0.02 + 0.006 * q).clamp(0.004, 0.045)
}

pub fn rim_intensity_for(q: f64) -> f64 {
    (0.74 + 0.06 * q).clamp(0.5, 0.97)
}

pub fn trabecular_intensity_for(q: f64) -> f64 {
    (0.46 + 0.025 * q).clamp(0.35, 0.58)
}

pub fn sample_half_params(q: f64, completeness: Completeness, rng: &mut ChaCha8Rng) -> HalfParams {
    let s = rng.gen_range(0.92..1.08);
    let angle = rng.gen_range(-0.1..0.1);
    let shift = [rng.gen_range(-0.04..0.04), rng.gen_range(-0.035..0.035)];
    HalfParams {
        geometry: FemurGeometry::template().transformed(s, angle, shift),
        completeness,
        rim_width: rim_width_for(q),
        rim_intensity: rim_intensity_for(q),
        trabecular_intensity: trabecular_intensity_for(q),
        cut_v: rng.gen_range(0.44..0.54),
        texture_phase: [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
    }
}

fn coverage(sd_px: f64) -> f64 {
    (0.5 - sd_px).clamp(0.0, 1.0)
}

fn seg_dist(p: P, a: P, b: P) -> f64 {
    let ab = sub(b, a);
    let t = ((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / (ab[0] * ab[0] + ab[1] * ab[1]);
    norm(sub(p, lerp(a, b, t.clamp(0.0, 1.0))))
}

/// Bone-only density of one hip half in `[0, 1]` (no soft tissue, no
/// noise): femur with textured trabecular interior and a cortical rim around
/// the head, acetabular roof, and an implant when requested.
pub fn render_bone(params: &HalfParams, h: usize, w: usize) -> Array2<f32> {
    let g = &params.geometry;
    let px = (h as f64 + w as f64) / 2.0;
    let ph = params.texture_phase;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let p = [(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64];
        let d_head = norm(sub(p, g.head_center)) - g.head_radius;
        let parts = [
            d_head,
            seg_dist(p, g.head_center, g.neck_base) - g.neck_half_width,
            norm(sub(p, g.gt_center)) - g.gt_radius,
            norm(sub(p, g.lt_center)) - g.lt_radius,
            seg_dist(p, g.shaft_top, g.shaft_bottom) - g.shaft_half_width,
        ];
        let bone = parts.iter().map(|&d| coverage(d * px)).fold(0.0, f64::max);
        let rim = coverage(d_head * px) - coverage((d_head + params.rim_width) * px);
        let texture = 0.04 * ((p[0] * 61.0 + ph[0]).sin() * (p[1] * 47.0 + ph[1]).sin())
            + 0.02 * ((p[0] + p[1]) * 97.0 + ph[2]).sin();
        let mut v = bone * (params.trabecular_intensity + texture) + rim * (params.rim_intensity - params.trabecular_intensity);
        // acetabular roof: upper arc hugging the head
        let d_c = norm(sub(p, g.head_center));
        if p[1] < g.head_center[1] + 0.01 {
            let arc = coverage((d_c - g.head_radius - 0.045) * px) - coverage((d_c - g.head_radius - 0.018) * px);
            v = v.max(0.38 * arc);
        }
        if params.completeness == Completeness::Implant {
            let screw_end = lerp(g.shaft_top, g.shaft_bottom, 0.45);
            let screw = coverage((seg_dist(p, g.head_center, screw_end) - 0.02) * px);
            let plate_a = g.shaft_point(g.shaft_top[1] + 0.02, -1.0);
            let plate_b = g.shaft_point(g.shaft_top[1] + 0.45, -1.0);
            let plate = coverage((seg_dist(p, plate_a, plate_b) - 0.022) * px);
            v = v.max(0.98 * screw.max(plate));
        }
        v as f32
    })
}

/// Radiograph-like half in `[0, 1]`: soft tissue, bone, pixel noise, and the
/// collimator cut-off for incomplete halves.
pub fn render_xray_half(params: &HalfParams, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let bone = render_bone(params, h, w);
    let noise = Normal::new(0.0, 0.02).expect("valid sd");
    let mut out = Array2::<f32>::zeros((h, w));
    for ((i, j), o) in out.indexed_iter_mut() {
        let v = (i as f64 + 0.5) / h as f64;
        let u = (j as f64 + 0.5) / w as f64;
        let tissue = 0.14 + 0.05 * v + 0.04 * u;
        let mut val = tissue + bone[[i, j]] as f64 * 0.8;
        if params.completeness == Completeness::Incomplete && v > params.cut_v {
            val = 0.03;
        }
        *o = (val + noise.sample(rng)).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Place a right-hip half and a left-hip half into one image; the left hip is
/// mirrored so that its medial side faces the image center.
pub fn compose_halves(right: &Array2<f32>, left: &Array2<f32>) -> Array2<f32> {
    let (h, w) = right.dim();
    Array2::from_shape_fn((h, 2 * w), |(i, j)| if j < w { right[[i, j]] } else { left[[i, 2 * w - 1 - j]] })
}

/// CT geometry drawn per study.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CtLayout {
    /// First depth row of the phantom; rows at/after it are phantom or table.
    pub phantom_row: usize,
    pub phantom_height: usize,
    pub table_height: usize,
}

pub const CT_AIR: f32 = 0.0;
pub const CT_TISSUE: f32 = 1000.0;
pub const CT_BONE: f32 = 1500.0;
pub const CT_PHANTOM: f32 = 3000.0;
pub const CT_TABLE: f32 = 1600.0;

/// Axial stack `(depth, height, width)`; depth runs anterior to posterior so
/// the phantom and table sit at the highest depth rows, beneath the body.
pub fn render_ct_volume(
    right: &HalfParams,
    left: &HalfParams,
    dims: (usize, usize, usize),
    layout: CtLayout,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let (d, h, w) = dims;
    let half = w / 2;
    let bone_r = render_bone(right, h, half);
    let bone_l = render_bone(left, h, half);
    let bone = compose_halves(&bone_r, &bone_l);
    let body_top = 2.0;
    let body_bottom = layout.phantom_row as f64 - 1.5;
    let dc = (body_top + body_bottom) / 2.0;
    let ad = (body_bottom - body_top) / 2.0;
    let aw = 0.47 * w as f64;
    let wc = (w as f64 - 1.0) / 2.0;
    let noise = Normal::new(0.0, 20.0).expect("valid sd");
    let ph_c0 = (0.3 * w as f64) as usize;
    let ph_c1 = (0.7 * w as f64) as usize;
    let table_start = layout.phantom_row + layout.phantom_height + 1;
    let mut vol = Array3::<f32>::zeros((d, h, w));
    for k in 0..d {
        let dk = (k as f64 - dc) / ad;
        for j in 0..w {
            let dj = (j as f64 - wc) / aw;
            let in_body = dk * dk + dj * dj <= 1.0;
            let in_slab = dk.abs() < 0.5;
            let structure = if k >= layout.phantom_row && k < layout.phantom_row + layout.phantom_height {
                if (ph_c0..ph_c1).contains(&j) {
                    let rod = (j - ph_c0) % 12 < 3;
                    Some(if rod { CT_PHANTOM + 800.0 } else { CT_PHANTOM })
                } else {
                    Some(CT_AIR)
                }
            } else if k >= table_start && k < table_start + layout.table_height {
                Some(CT_TABLE)
            } else {
                None
            };
            for i in 0..h {
                let base = match structure {
                    Some(v) => v,
                    None if in_body => {
                        let p = if j < half { right } else { left };
                        if p.completeness == Completeness::Incomplete && (i as f64 + 0.5) / h as f64 > p.cut_v {
                            // outside the scanned range
                            CT_AIR
                        } else if in_slab {
                            CT_TISSUE + bone[[i, j]] * CT_BONE
                        } else {
                            CT_TISSUE
                        }
                    }
                    None => CT_AIR,
                };
                vol[[k, i, j]] = base + noise.sample(rng) as f32;
            }
        }
    }
    vol
}
