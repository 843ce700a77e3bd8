//! Learnable collage state shared by the renderer, optimizer and session.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transforms::{idx, AffineParams, ColorParams};

/// Raw parameters per patch: 6 affine, 3 colour, 1 order.
pub const PARAMS_PER_PATCH: usize = 10;
pub const COLOR_OFFSET: usize = 6;
pub const ORDER_OFFSET: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub background: [f64; 3],
}

impl CanvasSpec {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            background: [0.0; 3],
        }
    }

    pub fn long_side(&self) -> usize {
        self.width.max(self.height)
    }

    /// Same background, different pixel dimensions.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        Self { width, height, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidConfig(format!(
                "canvas must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidConfig("background must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compositing {
    /// Additive, clamped to `[0, 1]`.
    Transparency,
    /// Additive, normalised by the alpha sum.
    MaskedTransparency,
    /// Weighted by `sigmoid(order) * alpha`, normalised by the weight sum.
    Opacity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderMode {
    pub compositing: Compositing,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-6
}

impl RenderMode {
    pub fn new(compositing: Compositing) -> Self {
        Self {
            compositing,
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchState {
    pub patch_id: usize,
    pub affine: AffineParams,
    pub color: ColorParams,
    pub order_raw: f64,
}

impl PatchState {
    /// Identity pose, mid-grey multipliers, neutral order.
    pub fn new(patch_id: usize) -> Self {
        Self {
            patch_id,
            affine: AffineParams::default(),
            color: ColorParams::default(),
            order_raw: 0.0,
        }
    }

    pub fn params(&self) -> [f64; PARAMS_PER_PATCH] {
        let mut p = [0.0; PARAMS_PER_PATCH];
        p[..6].copy_from_slice(&self.affine.raw);
        p[COLOR_OFFSET..ORDER_OFFSET].copy_from_slice(&self.color.raw_rgb);
        p[ORDER_OFFSET] = self.order_raw;
        p
    }

    pub fn set_params(&mut self, p: &[f64; PARAMS_PER_PATCH]) {
        self.affine.raw.copy_from_slice(&p[..6]);
        self.color.raw_rgb.copy_from_slice(&p[COLOR_OFFSET..ORDER_OFFSET]);
        self.order_raw = p[ORDER_OFFSET];
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollageGenome {
    pub states: Vec<PatchState>,
    pub mode: RenderMode,
    pub canvas: CanvasSpec,
    /// Patch half-extent, in normalised canvas units, at effective scale 1.
    pub base_scale: f64,
}

impl CollageGenome {
    /// Random dispersal: translation and rotation raw values drawn from
    /// `Normal(0, 0.5)`, everything else at its neutral value. Patch `i`
    /// uses library patch `i mod library_len`.
    pub fn random<R: Rng + ?Sized>(
        num_states: usize,
        library_len: usize,
        mode: RenderMode,
        canvas: CanvasSpec,
        base_scale: f64,
        rng: &mut R,
    ) -> Self {
        let spread = Normal::new(0.0, 0.5).unwrap();
        let states = (0..num_states)
            .map(|i| {
                let mut s = PatchState::new(i % library_len.max(1));
                s.affine.raw[idx::TX] = spread.sample(rng);
                s.affine.raw[idx::TY] = spread.sample(rng);
                s.affine.raw[idx::ROT] = spread.sample(rng);
                s
            })
            .collect();
        Self {
            states,
            mode,
            canvas,
            base_scale,
        }
    }

    pub fn validate(&self, library_len: usize) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::InvalidConfig("genome has no patches".into()));
        }
        if let Some(s) = self.states.iter().find(|s| s.patch_id >= library_len) {
            return Err(Error::InvalidConfig(format!(
                "patch id {} outside library of {library_len}",
                s.patch_id
            )));
        }
        if !(self.mode.epsilon > 0.0) {
            return Err(Error::InvalidConfig("render epsilon must be positive".into()));
        }
        if !(self.base_scale > 0.0) {
            return Err(Error::InvalidConfig("base scale must be positive".into()));
        }
        self.canvas.validate()
    }
}

/// `dLoss/dRaw` for every patch, laid out like [`PatchState::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub per_patch: Vec<[f64; PARAMS_PER_PATCH]>,
}

impl GradientBundle {
    pub fn zeros(n: usize) -> Self {
        Self {
            per_patch: vec![[0.0; PARAMS_PER_PATCH]; n],
        }
    }

    pub fn d_affine(&self, i: usize) -> &[f64] {
        &self.per_patch[i][..6]
    }

    pub fn d_color(&self, i: usize) -> &[f64] {
        &self.per_patch[i][COLOR_OFFSET..ORDER_OFFSET]
    }

    pub fn d_order(&self, i: usize) -> f64 {
        self.per_patch[i][ORDER_OFFSET]
    }

    pub fn is_finite(&self) -> bool {
        self.per_patch.iter().flatten().all(|v| v.is_finite())
    }
}
