//! Raw learnable parameters, their bounded effective values, and the 3x3
//! affine matrices built from them.
//!
//! Every learnable quantity is stored unconstrained ("raw") and squashed
//! into its range on use, so the optimizer never has to project.
//!
//! | raw       | effective                         | range            |
//! |-----------|-----------------------------------|------------------|
//! | `t_x,t_y` | `tanh(raw)`                       | `[-1, 1]`        |
//! | `rot`     | `raw` (radians)                   | unbounded        |
//! | `scale`   | `S * exp(ln2 * tanh(raw))`        | `[S/2, 2S]`      |
//! | `squeeze` | `exp(ln2 * tanh(raw))`            | `[1/2, 2]`       |
//! | `shear`   | `tanh(raw)`                       | `[-1, 1]`        |
//! | colour    | `sigmoid(raw)`                    | `(0, 1)`         |
//! | order     | `sigmoid(raw)`                    | `(0, 1)`         |

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genome::{CanvasSpec, PatchState};

/// Largest |tanh| value reachable from a human edit.
pub const TANH_LIMIT: f64 = 0.9999;
const SIGMOID_LO: f64 = 0.5 * (1.0 - TANH_LIMIT);
const SIGMOID_HI: f64 = 1.0 - SIGMOID_LO;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColorParams {
    pub raw_rgb: [f64; 3],
}

impl ColorParams {
    pub fn multipliers(&self) -> [f64; 3] {
        self.raw_rgb.map(sigmoid)
    }
}

/// Index of each component in [`AffineParams::raw`].
pub mod idx {
    pub const TX: usize = 0;
    pub const TY: usize = 1;
    pub const ROT: usize = 2;
    pub const SCALE: usize = 3;
    pub const SQUEEZE: usize = 4;
    pub const SHEAR: usize = 5;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub raw: [f64; 6],
}

/// Effective (squashed) pose values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub tx: f64,
    pub ty: f64,
    pub rotation: f64,
    pub scale: f64,
    pub squeeze: f64,
    pub shear: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            tx: 0.0,
            ty: 0.0,
            rotation: 0.0,
            scale: 1.0,
            squeeze: 1.0,
            shear: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.tx, self.ty, self.rotation, self.scale, self.squeeze, self.shear]
    }
}

pub fn squash(params: &AffineParams, base_scale: f64) -> Pose {
    let r = params.raw;
    Pose {
        tx: r[idx::TX].tanh(),
        ty: r[idx::TY].tanh(),
        rotation: r[idx::ROT],
        scale: base_scale * (LN_2 * r[idx::SCALE].tanh()).exp(),
        squeeze: (LN_2 * r[idx::SQUEEZE].tanh()).exp(),
        shear: r[idx::SHEAR].tanh(),
    }
}

/// Derivative of each effective component w.r.t. its own raw value (the
/// squashing Jacobian is diagonal).
pub fn squash_grad(params: &AffineParams, base_scale: f64) -> [f64; 6] {
    let r = params.raw;
    let dtanh = |x: f64| {
        let t = x.tanh();
        1.0 - t * t
    };
    let p = squash(params, base_scale);
    [
        dtanh(r[idx::TX]),
        dtanh(r[idx::TY]),
        1.0,
        p.scale * LN_2 * dtanh(r[idx::SCALE]),
        p.squeeze * LN_2 * dtanh(r[idx::SQUEEZE]),
        dtanh(r[idx::SHEAR]),
    ]
}

/// Inverse of [`squash`]. Values outside the reachable span are clamped; the
/// flag reports whether any clamping happened.
pub fn unsquash(pose: &Pose, base_scale: f64) -> (AffineParams, bool) {
    let mut clamped = false;
    let raw = [
        bounded_atanh(pose.tx, &mut clamped),
        bounded_atanh(pose.ty, &mut clamped),
        pose.rotation,
        bounded_atanh(positive_ln(pose.scale / base_scale) / LN_2, &mut clamped),
        bounded_atanh(positive_ln(pose.squeeze) / LN_2, &mut clamped),
        bounded_atanh(pose.shear, &mut clamped),
    ];
    (AffineParams { raw }, clamped)
}

fn positive_ln(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn bounded_atanh(v: f64, clamped: &mut bool) -> f64 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(-TANH_LIMIT, TANH_LIMIT) };
    *clamped |= c != v;
    c.atanh()
}

fn bounded_logit(p: f64, clamped: &mut bool) -> f64 {
    let c = if p.is_nan() { 0.5 } else { p.clamp(SIGMOID_LO, SIGMOID_HI) };
    *clamped |= c != p;
    logit(c)
}

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Maps patch-frame coordinates to canvas coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMatrix(pub Mat3);

impl AffineMatrix {
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn mul(&self, other: &AffineMatrix) -> AffineMatrix {
        let (a, b) = (&self.0, &other.0);
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        AffineMatrix(out)
    }
}

/// `T(tx, ty) * R(rot) * Shear_x(h) * Scale(s*q, s/q)`.
pub fn build_matrix(p: &Pose) -> AffineMatrix {
    let (sn, c) = p.rotation.sin_cos();
    let a = p.scale * p.squeeze;
    let b = p.scale / p.squeeze;
    let h = p.shear;
    AffineMatrix([
        [c * a, (c * h - sn) * b, p.tx],
        [sn * a, (sn * h + c) * b, p.ty],
        [0.0, 0.0, 1.0],
    ])
}

/// Partial derivatives of [`build_matrix`] w.r.t. each effective component,
/// in [`idx`] order.
pub fn build_matrix_grad(p: &Pose) -> [Mat3; 6] {
    let (sn, c) = p.rotation.sin_cos();
    let (s, q, h) = (p.scale, p.squeeze, p.shear);
    let a = s * q;
    let b = s / q;
    let z = [0.0, 0.0, 0.0];
    [
        [[0.0, 0.0, 1.0], z, z],
        [z, [0.0, 0.0, 1.0], z],
        [[-sn * a, (-sn * h - c) * b, 0.0], [c * a, (c * h - sn) * b, 0.0], z],
        [[c * q, (c * h - sn) / q, 0.0], [sn * q, (sn * h + c) / q, 0.0], z],
        [
            [c * s, -(c * h - sn) * s / (q * q), 0.0],
            [sn * s, -(sn * h + c) * s / (q * q), 0.0],
            z,
        ],
        [[0.0, c * b, 0.0], [0.0, sn * b, 0.0], z],
    ]
}

/// Matrix derivatives w.r.t. the six raw parameters.
pub fn matrix_raw_grad(params: &AffineParams, base_scale: f64) -> [Mat3; 6] {
    let pose = squash(params, base_scale);
    let mut g = build_matrix_grad(&pose);
    let d = squash_grad(params, base_scale);
    for (k, m) in g.iter_mut().enumerate() {
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v *= d[k];
            }
        }
    }
    g
}

pub fn invert_matrix(m: &AffineMatrix) -> Result<AffineMatrix> {
    let a = &m.0;
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.abs() < 1e-12 || !det.is_finite() {
        return Err(Error::Degenerate(det));
    }
    let inv_det = 1.0 / det;
    let i00 = a[1][1] * inv_det;
    let i01 = -a[0][1] * inv_det;
    let i10 = -a[1][0] * inv_det;
    let i11 = a[0][0] * inv_det;
    Ok(AffineMatrix([
        [i00, i01, -(i00 * a[0][2] + i01 * a[1][2])],
        [i10, i11, -(i10 * a[0][2] + i11 * a[1][2])],
        [0.0, 0.0, 1.0],
    ]))
}

/// Pose in the units an artist edits: canvas pixels, degrees, multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanPose {
    pub x: f64,
    pub y: f64,
    pub rotation: f64,
    pub scale: f64,
    pub squeeze: f64,
    pub shear: f64,
    pub rgb: [f64; 3],
    pub order: f64,
}

/// Any subset of [`HumanPose`] fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseEdit {
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub rotation: Option<f64>,
    pub scale: Option<f64>,
    pub squeeze: Option<f64>,
    pub shear: Option<f64>,
    pub rgb: Option<[f64; 3]>,
    pub order: Option<f64>,
}

impl From<HumanPose> for PoseEdit {
    fn from(p: HumanPose) -> Self {
        Self {
            x: Some(p.x),
            y: Some(p.y),
            rotation: Some(p.rotation),
            scale: Some(p.scale),
            squeeze: Some(p.squeeze),
            shear: Some(p.shear),
            rgb: Some(p.rgb),
            order: Some(p.order),
        }
    }
}

/// Pixel position of a normalised translation. The canvas centre is
/// `(W/2, H/2)` and the longer side spans `[-1, 1]`.
pub fn translation_to_pixels(tx: f64, ty: f64, canvas: &CanvasSpec) -> (f64, f64) {
    let half = canvas.long_side() as f64 / 2.0;
    (canvas.width as f64 / 2.0 + tx * half, canvas.height as f64 / 2.0 + ty * half)
}

pub fn pixels_to_translation(x: f64, y: f64, canvas: &CanvasSpec) -> (f64, f64) {
    let half = canvas.long_side() as f64 / 2.0;
    ((x - canvas.width as f64 / 2.0) / half, (y - canvas.height as f64 / 2.0) / half)
}

pub fn to_human(state: &PatchState, canvas: &CanvasSpec, base_scale: f64) -> HumanPose {
    let p = squash(&state.affine, base_scale);
    let (x, y) = translation_to_pixels(p.tx, p.ty, canvas);
    HumanPose {
        x,
        y,
        rotation: p.rotation.to_degrees(),
        scale: p.scale,
        squeeze: p.squeeze,
        shear: p.shear,
        rgb: state.color.multipliers(),
        order: sigmoid(state.order_raw),
    }
}

/// Applies the fields present in `edit` to a copy of `state`. Returns the
/// new state and whether any value had to be clamped into range.
pub fn from_human(
    edit: &PoseEdit,
    state: &PatchState,
    canvas: &CanvasSpec,
    base_scale: f64,
) -> (PatchState, bool) {
    let mut out = state.clone();
    let mut clamped = false;
    let current = to_human(state, canvas, base_scale);

    if edit.x.is_some() || edit.y.is_some() {
        let x = edit.x.unwrap_or(current.x);
        let y = edit.y.unwrap_or(current.y);
        let (tx, ty) = pixels_to_translation(x, y, canvas);
        if edit.x.is_some() {
            out.affine.raw[idx::TX] = bounded_atanh(tx, &mut clamped);
        }
        if edit.y.is_some() {
            out.affine.raw[idx::TY] = bounded_atanh(ty, &mut clamped);
        }
    }
    if let Some(deg) = edit.rotation {
        out.affine.raw[idx::ROT] = deg.to_radians();
    }
    if let Some(s) = edit.scale {
        out.affine.raw[idx::SCALE] = bounded_atanh(positive_ln(s / base_scale) / LN_2, &mut clamped);
    }
    if let Some(q) = edit.squeeze {
        out.affine.raw[idx::SQUEEZE] = bounded_atanh(positive_ln(q) / LN_2, &mut clamped);
    }
    if let Some(h) = edit.shear {
        out.affine.raw[idx::SHEAR] = bounded_atanh(h, &mut clamped);
    }
    if let Some(rgb) = edit.rgb {
        for (k, v) in rgb.into_iter().enumerate() {
            out.color.raw_rgb[k] = bounded_logit(v, &mut clamped);
        }
    }
    if let Some(o) = edit.order {
        out.order_raw = bounded_logit(o, &mut clamped);
    }
    (out, clamped)
}
