use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, CriticOutput, CriticSpec};
use crate::error::{Error, Result};
use crate::image::RgbImage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAggregation {
    #[default]
    Arithmetic,
    Harmonic,
}

/// Combines per-critic losses. Returns the aggregate and its derivative
/// w.r.t. each loss.
pub fn aggregate(losses: &[f64], agg: LossAggregation) -> Result<(f64, Vec<f64>)> {
    if losses.is_empty() {
        return Err(Error::AggregationError("no losses to aggregate".into()));
    }
    let n = losses.len() as f64;
    match agg {
        LossAggregation::Arithmetic => {
            let mean = losses.iter().sum::<f64>() / n;
            Ok((mean, vec![1.0 / n; losses.len()]))
        }
        LossAggregation::Harmonic => {
            if let Some(bad) = losses.iter().find(|&&l| !(l > 0.0)) {
                return Err(Error::AggregationError(format!(
                    "harmonic mean needs positive losses, got {bad}"
                )));
            }
            let inv_sum: f64 = losses.iter().map(|l| 1.0 / l).sum();
            let h = n / inv_sum;
            let weights = losses.iter().map(|l| h * h / (n * l * l)).collect();
            Ok((h, weights))
        }
    }
}

/// A `grid x grid` array of overlapping `crop x crop` windows over a square
/// canvas, each with its own critic, plus an optional whole-canvas critic
/// that sees a box-downsampled `crop x crop` view.
#[derive(Clone, Debug)]
pub struct RegionLayout {
    pub grid: usize,
    pub crop: usize,
    pub canvas: usize,
    pub region_critics: Vec<CriticSpec>,
    pub global_critic: Option<CriticSpec>,
}

impl RegionLayout {
    pub fn new(
        grid: usize,
        crop: usize,
        canvas: usize,
        region_critics: Vec<CriticSpec>,
        global_critic: Option<CriticSpec>,
    ) -> Result<Self> {
        validate_geometry(grid, crop, canvas, global_critic.is_some())?;
        if region_critics.len() != grid * grid {
            return Err(Error::InvalidLayout(format!(
                "{} region critics for a {grid}x{grid} grid",
                region_critics.len()
            )));
        }
        Ok(Self {
            grid,
            crop,
            canvas,
            region_critics,
            global_critic,
        })
    }

    /// One critic looking at the whole canvas at full resolution.
    pub fn single(canvas: usize, critic: CriticSpec) -> Self {
        Self {
            grid: 1,
            crop: canvas,
            canvas,
            region_critics: vec![critic],
            global_critic: None,
        }
    }

    pub fn stride(&self) -> usize {
        stride(self.grid, self.crop, self.canvas)
    }

    /// Top-left `(x, y)` of each region, row-major.
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        let s = self.stride();
        (0..self.grid)
            .flat_map(|row| (0..self.grid).map(move |col| (col * s, row * s)))
            .collect()
    }

    pub fn critic_count(&self) -> usize {
        self.region_critics.len() + usize::from(self.global_critic.is_some())
    }

    pub fn global_factor(&self) -> usize {
        self.canvas / self.crop
    }
}

fn stride(grid: usize, crop: usize, canvas: usize) -> usize {
    if grid > 1 {
        (canvas - crop) / (grid - 1)
    } else {
        0
    }
}

pub fn validate_geometry(grid: usize, crop: usize, canvas: usize, include_global: bool) -> Result<()> {
    if grid == 0 || crop == 0 || crop > canvas {
        return Err(Error::InvalidLayout(format!(
            "grid {grid}, crop {crop}, canvas {canvas}"
        )));
    }
    if grid == 1 && crop != canvas {
        return Err(Error::InvalidLayout(
            "a 1x1 grid needs crop == canvas".into(),
        ));
    }
    if grid > 1 && !(canvas - crop).is_multiple_of(grid - 1) {
        return Err(Error::InvalidLayout(format!(
            "canvas - crop = {} is not divisible by grid - 1 = {}",
            canvas - crop,
            grid - 1
        )));
    }
    if grid > 1 && stride(grid, crop, canvas) > crop {
        return Err(Error::InvalidLayout("regions leave gaps (stride > crop)".into()));
    }
    if include_global && !canvas.is_multiple_of(crop) {
        return Err(Error::InvalidLayout(format!(
            "global view needs canvas {canvas} to be a multiple of crop {crop}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticReport {
    /// Region losses in row-major order, then the global loss if present.
    pub losses: Vec<f64>,
    pub aggregate: f64,
    pub grad: RgbImage,
}

/// Scores every region plus the global view and assembles the gradient of
/// the aggregate loss w.r.t. the full canvas. `parallel` only changes how
/// the critics are scheduled; the report is identical either way.
pub fn evaluate_layout(
    layout: &RegionLayout,
    agg: LossAggregation,
    image: &RgbImage,
    parallel: bool,
) -> Result<CriticReport> {
    let c = layout.canvas;
    image.check_shape(c, c)?;
    let offsets = layout.offsets();
    let mut jobs: Vec<(&CriticSpec, RgbImage)> = layout
        .region_critics
        .iter()
        .zip(&offsets)
        .map(|(critic, &(x, y))| (critic, image.crop(x, y, layout.crop)))
        .collect();
    if let Some(global) = &layout.global_critic {
        jobs.push((global, image.box_downsample(layout.global_factor())));
    }

    let outputs: Vec<CriticOutput> = if parallel {
        jobs.par_iter()
            .map(|(critic, view)| evaluate(critic, view))
            .collect::<Result<_>>()?
    } else {
        jobs.iter()
            .map(|(critic, view)| evaluate(critic, view))
            .collect::<Result<_>>()?
    };

    let losses: Vec<f64> = outputs.iter().map(|o| o.loss).collect();
    let (total, weights) = aggregate(&losses, agg)?;

    let mut grad = RgbImage::new(c, c);
    let k = layout.crop;
    for ((out, &(x0, y0)), &w) in outputs.iter().zip(&offsets).zip(&weights) {
        for y in 0..k {
            let src = y * k * 3;
            let dst = ((y0 + y) * c + x0) * 3;
            for i in 0..k * 3 {
                grad.data[dst + i] += w * out.grad.data[src + i];
            }
        }
    }
    if layout.global_critic.is_some() {
        let w = weights[offsets.len()];
        let up = outputs[offsets.len()].grad.box_upsample_adjoint(layout.global_factor());
        for (g, u) in grad.data.iter_mut().zip(&up.data) {
            *g += w * u;
        }
    }
    Ok(CriticReport {
        losses,
        aggregate: total,
        grad,
    })
}
