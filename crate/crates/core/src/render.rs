//! Differentiable patch compositing.
//!
//! Each canvas pixel centre is mapped to normalised coordinates (longer side
//! spans `[-1, 1]`), pulled back into every patch frame through the inverse
//! affine matrix, and the patch is sampled bilinearly with zero padding.
//! Per-pixel contributions are combined in patch-index order, which keeps
//! results bit-reproducible whatever the thread count.
//!
//! [`backward`] is the exact adjoint of [`render`]: it re-runs the forward
//! sampling and pushes `dLoss/dImage` through compositing, bilinear
//! sampling, the matrix inverse and the parameter squashing.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::genome::{
    CollageGenome, Compositing, GradientBundle, COLOR_OFFSET, ORDER_OFFSET,
};
use crate::image::{RgbImage, RgbaImage};
use crate::patches::PatchLibrary;
use crate::transforms::{
    build_matrix, invert_matrix, matrix_raw_grad, sigmoid, sigmoid_grad, squash, Mat3,
};

/// Minimum contribution weight for [`hit_test`] to report a patch.
pub const HIT_THRESHOLD: f64 = 1e-6;

/// Normalised coordinate of a pixel centre along one axis.
#[inline]
pub fn pixel_to_norm(i: usize, extent: usize, long_side: usize) -> f64 {
    (2.0 * i as f64 + 1.0 - extent as f64) / long_side as f64
}

/// Bilinear sample with zero padding, plus its derivative w.r.t. the
/// texture-space position.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sample {
    pub value: [f64; 4],
    pub d_dx: [f64; 4],
    pub d_dy: [f64; 4],
}

#[inline]
fn texel(tex: &RgbaImage, x: i64, y: i64) -> [f64; 4] {
    if x < 0 || y < 0 || x >= tex.width as i64 || y >= tex.height as i64 {
        return [0.0; 4];
    }
    let i = (y as usize * tex.width + x as usize) * 4;
    [
        f64::from(tex.data[i]),
        f64::from(tex.data[i + 1]),
        f64::from(tex.data[i + 2]),
        f64::from(tex.data[i + 3]),
    ]
}

/// Samples `tex` at texel-space position `(px, py)`, where texel centres sit
/// on integer coordinates.
#[inline]
pub fn bilinear(tex: &RgbaImage, px: f64, py: f64, with_grad: bool) -> Sample {
    if !(px > -1.0 && py > -1.0 && px < tex.width as f64 && py < tex.height as f64) {
        return Sample::default();
    }
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = texel(tex, ix, iy);
    let v10 = texel(tex, ix + 1, iy);
    let v01 = texel(tex, ix, iy + 1);
    let v11 = texel(tex, ix + 1, iy + 1);
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w10 = fx * (1.0 - fy);
    let w01 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    let mut s = Sample::default();
    for c in 0..4 {
        s.value[c] = w00 * v00[c] + w10 * v10[c] + w01 * v01[c] + w11 * v11[c];
    }
    if with_grad {
        for c in 0..4 {
            s.d_dx[c] = (1.0 - fy) * (v10[c] - v00[c]) + fy * (v11[c] - v01[c]);
            s.d_dy[c] = (1.0 - fx) * (v01[c] - v00[c]) + fx * (v11[c] - v10[c]);
        }
    }
    s
}

/// Per-patch quantities that do not depend on the pixel.
struct Prepared<'a> {
    tex: &'a RgbaImage,
    /// Canvas-to-patch matrix rows.
    inv: Mat3,
    mult: [f64; 3],
    order: f64,
    /// Texel units per normalised patch unit.
    half_long: f64,
    offset_x: f64,
    offset_y: f64,
    /// Pixel bounding box `[x0, x1) x [y0, y1)` outside which the patch
    /// samples are exactly zero.
    bbox: (usize, usize, usize, usize),
}

impl Prepared<'_> {
    #[inline]
    fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.bbox.0 && x < self.bbox.1 && y >= self.bbox.2 && y < self.bbox.3
    }

    #[inline]
    fn patch_coords(&self, nx: f64, ny: f64) -> (f64, f64) {
        let m = &self.inv;
        (m[0][0] * nx + m[0][1] * ny + m[0][2], m[1][0] * nx + m[1][1] * ny + m[1][2])
    }

    #[inline]
    fn sample(&self, ux: f64, uy: f64, with_grad: bool) -> Sample {
        let px = ux * self.half_long + self.offset_x;
        let py = uy * self.half_long + self.offset_y;
        bilinear(self.tex, px, py, with_grad)
    }
}

struct Frame {
    width: usize,
    height: usize,
    long: usize,
}

impl Frame {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            long: width.max(height),
        }
    }

    #[inline]
    fn norm(&self, x: usize, y: usize) -> (f64, f64) {
        (pixel_to_norm(x, self.width, self.long), pixel_to_norm(y, self.height, self.long))
    }

    /// Continuous pixel coordinate (centres on integers) of a normalised point.
    fn to_pixel(&self, nx: f64, ny: f64) -> (f64, f64) {
        let l = self.long as f64;
        ((nx * l + self.width as f64) / 2.0 - 0.5, (ny * l + self.height as f64) / 2.0 - 0.5)
    }
}

fn prepare<'a>(
    genome: &CollageGenome,
    library: &'a PatchLibrary,
    frame: &Frame,
) -> Result<Vec<Prepared<'a>>> {
    genome.validate(library.len())?;
    genome
        .states
        .iter()
        .map(|state| {
            let tex = library.patches[state.patch_id].level_for(frame.long);
            let pose = squash(&state.affine, genome.base_scale);
            let m = build_matrix(&pose);
            let inv = invert_matrix(&m)?;
            let long = tex.width.max(tex.height) as f64;
            let half_long = long / 2.0;

            // Support of the zero-padded bilinear sampler in the patch frame.
            let ex = (tex.width as f64 + 1.0) / long;
            let ey = (tex.height as f64 + 1.0) / long;
            let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) =
                (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for (ux, uy) in [(-ex, -ey), (ex, -ey), (-ex, ey), (ex, ey)] {
                let (nx, ny) = m.apply(ux, uy);
                let (px, py) = frame.to_pixel(nx, ny);
                x_lo = x_lo.min(px);
                x_hi = x_hi.max(px);
                y_lo = y_lo.min(py);
                y_hi = y_hi.max(py);
            }
            let clamp_lo = |v: f64, n: usize| (v.floor() - 1.0).clamp(0.0, n as f64) as usize;
            let clamp_hi = |v: f64, n: usize| (v.ceil() + 2.0).clamp(0.0, n as f64) as usize;
            let bbox = (
                clamp_lo(x_lo, frame.width),
                clamp_hi(x_hi, frame.width),
                clamp_lo(y_lo, frame.height),
                clamp_hi(y_hi, frame.height),
            );
            Ok(Prepared {
                tex,
                inv: inv.0,
                mult: state.color.multipliers(),
                order: sigmoid(state.order_raw),
                half_long,
                offset_x: tex.width as f64 / 2.0 - 0.5,
                offset_y: tex.height as f64 / 2.0 - 0.5,
                bbox,
            })
        })
        .collect()
}

#[inline]
fn composite_pixel(
    mode: Compositing,
    eps: f64,
    bg: [f64; 3],
    patches: &[Prepared<'_>],
    x: usize,
    y: usize,
    nx: f64,
    ny: f64,
) -> [f64; 3] {
    match mode {
        Compositing::Transparency => {
            let mut acc = bg;
            for p in patches.iter().filter(|p| p.covers(x, y)) {
                let (ux, uy) = p.patch_coords(nx, ny);
                let s = p.sample(ux, uy, false).value;
                for c in 0..3 {
                    acc[c] += s[3] * p.mult[c] * s[c];
                }
            }
            acc.map(|v| v.clamp(0.0, 1.0))
        }
        Compositing::MaskedTransparency => {
            let mut num = bg.map(|b| b * eps);
            let mut den = eps;
            for p in patches.iter().filter(|p| p.covers(x, y)) {
                let (ux, uy) = p.patch_coords(nx, ny);
                let s = p.sample(ux, uy, false).value;
                for c in 0..3 {
                    num[c] += s[3] * p.mult[c] * s[c];
                }
                den += s[3];
            }
            num.map(|v| v / den)
        }
        Compositing::Opacity => {
            let mut num = bg.map(|b| b * eps);
            let mut den = eps;
            for p in patches.iter().filter(|p| p.covers(x, y)) {
                let (ux, uy) = p.patch_coords(nx, ny);
                let s = p.sample(ux, uy, false).value;
                let w = p.order * s[3];
                for c in 0..3 {
                    num[c] += w * p.mult[c] * s[c];
                }
                den += w;
            }
            num.map(|v| v / den)
        }
    }
}

/// Renders `genome` at `width x height`, sampling each patch at the
/// largest mip level that fits the render's longer side.
pub fn render(
    genome: &CollageGenome,
    library: &PatchLibrary,
    width: usize,
    height: usize,
) -> Result<RgbImage> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig("render size must be non-zero".into()));
    }
    let frame = Frame::new(width, height);
    let patches = prepare(genome, library, &frame)?;
    let mode = genome.mode.compositing;
    let eps = genome.mode.epsilon;
    let bg = genome.canvas.background;
    let mut out = RgbImage::new(width, height);
    out.data
        .par_chunks_mut(width * 3)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..width {
                let (nx, ny) = frame.norm(x, y);
                let px = composite_pixel(mode, eps, bg, &patches, x, y, nx, ny);
                row[x * 3..x * 3 + 3].copy_from_slice(&px);
            }
        });
    Ok(out)
}

/// Renders at the genome's own canvas size.
pub fn render_canvas(genome: &CollageGenome, library: &PatchLibrary) -> Result<RgbImage> {
    render(genome, library, genome.canvas.width, genome.canvas.height)
}

/// Same geometry as [`render_canvas`] at a larger output size, using the
/// higher-resolution patch levels that the larger output can use.
pub fn render_hires(
    genome: &CollageGenome,
    library: &PatchLibrary,
    out_width: usize,
    out_height: usize,
) -> Result<RgbImage> {
    let c = &genome.canvas;
    if out_width < c.width || out_height < c.height {
        return Err(Error::InvalidConfig(format!(
            "high-resolution export {out_width}x{out_height} is smaller than the {}x{} canvas",
            c.width, c.height
        )));
    }
    render(genome, library, out_width, out_height)
}

/// Per-patch data gathered at one pixel during the backward pass.
#[derive(Clone, Copy)]
struct Hit {
    patch: usize,
    ux: f64,
    uy: f64,
    s: Sample,
}

/// Running per-patch sums for one row: the 2x3 outer product that is later
/// contracted with `dM/dRaw`, the colour-multiplier gradient, and the
/// order-weight gradient.
#[derive(Clone, Copy, Default)]
struct Accum {
    outer: [[f64; 3]; 2],
    d_mult: [f64; 3],
    d_order: f64,
}

/// Exact gradient of `L` w.r.t. every raw parameter, given `dL/dImage` at
/// the resolution it was rendered.
pub fn backward(
    genome: &CollageGenome,
    library: &PatchLibrary,
    d_image: &RgbImage,
) -> Result<GradientBundle> {
    let (width, height) = (d_image.width, d_image.height);
    d_image.check_shape(width, height)?;
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig("gradient image is empty".into()));
    }
    if d_image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite dLoss/dImage".into()));
    }
    let frame = Frame::new(width, height);
    let patches = prepare(genome, library, &frame)?;
    let n = patches.len();
    let mode = genome.mode.compositing;
    let eps = genome.mode.epsilon;
    let bg = genome.canvas.background;

    let rows: Vec<Vec<Accum>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut acc = vec![Accum::default(); n];
            let mut hits: Vec<Hit> = Vec::with_capacity(n);
            for x in 0..width {
                let gi = (y * width + x) * 3;
                let g = [d_image.data[gi], d_image.data[gi + 1], d_image.data[gi + 2]];
                if g == [0.0; 3] {
                    continue;
                }
                let (nx, ny) = frame.norm(x, y);
                hits.clear();
                for (i, p) in patches.iter().enumerate() {
                    if !p.covers(x, y) {
                        continue;
                    }
                    let (ux, uy) = p.patch_coords(nx, ny);
                    let s = p.sample(ux, uy, true);
                    hits.push(Hit { patch: i, ux, uy, s });
                }
                if hits.is_empty() {
                    continue;
                }
                accumulate_pixel(mode, eps, bg, &patches, &hits, g, &mut acc);
            }
            acc
        })
        .collect();

    let mut totals = vec![Accum::default(); n];
    for row in &rows {
        for (t, a) in totals.iter_mut().zip(row) {
            for r in 0..2 {
                for c in 0..3 {
                    t.outer[r][c] += a.outer[r][c];
                }
            }
            for c in 0..3 {
                t.d_mult[c] += a.d_mult[c];
            }
            t.d_order += a.d_order;
        }
    }

    let mut bundle = GradientBundle::zeros(n);
    for (i, (state, t)) in genome.states.iter().zip(&totals).enumerate() {
        let dm = matrix_raw_grad(&state.affine, genome.base_scale);
        let out = &mut bundle.per_patch[i];
        for k in 0..6 {
            let mut v = 0.0;
            for r in 0..2 {
                for c in 0..3 {
                    v += t.outer[r][c] * dm[k][r][c];
                }
            }
            out[k] = v;
        }
        for c in 0..3 {
            out[COLOR_OFFSET + c] = t.d_mult[c] * sigmoid_grad(state.color.raw_rgb[c]);
        }
        out[ORDER_OFFSET] = t.d_order * sigmoid_grad(state.order_raw);
    }
    Ok(bundle)
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_pixel(
    mode: Compositing,
    eps: f64,
    bg: [f64; 3],
    patches: &[Prepared<'_>],
    hits: &[Hit],
    g: [f64; 3],
    acc: &mut [Accum],
) {
    // Forward composite at this pixel, then dL/d(alpha), dL/d(rgb sample),
    // dL/d(multiplier) and dL/d(order weight) per patch.
    match mode {
        Compositing::Transparency => {
            let mut pre = bg;
            for h in hits {
                let p = &patches[h.patch];
                for c in 0..3 {
                    pre[c] += h.s.value[3] * p.mult[c] * h.s.value[c];
                }
            }
            // Clamp passes gradient only where it is not saturated.
            let gc: [f64; 3] = std::array::from_fn(|c| if pre[c] < 1.0 { g[c] } else { 0.0 });
            for h in hits {
                let p = &patches[h.patch];
                let (a, rgb) = (h.s.value[3], &h.s.value);
                let mut da = 0.0;
                let mut drgb = [0.0; 3];
                for c in 0..3 {
                    da += gc[c] * p.mult[c] * rgb[c];
                    drgb[c] = gc[c] * a * p.mult[c];
                    acc[h.patch].d_mult[c] += gc[c] * a * rgb[c];
                }
                push_spatial(p, h, da, drgb, &mut acc[h.patch]);
            }
        }
        Compositing::MaskedTransparency => {
            let mut num = bg.map(|b| b * eps);
            let mut den = eps;
            for h in hits {
                let p = &patches[h.patch];
                for c in 0..3 {
                    num[c] += h.s.value[3] * p.mult[c] * h.s.value[c];
                }
                den += h.s.value[3];
            }
            let img = num.map(|v| v / den);
            let gd = g.map(|v| v / den);
            for h in hits {
                let p = &patches[h.patch];
                let (a, rgb) = (h.s.value[3], &h.s.value);
                let mut da = 0.0;
                let mut drgb = [0.0; 3];
                for c in 0..3 {
                    da += gd[c] * (p.mult[c] * rgb[c] - img[c]);
                    drgb[c] = gd[c] * a * p.mult[c];
                    acc[h.patch].d_mult[c] += gd[c] * a * rgb[c];
                }
                push_spatial(p, h, da, drgb, &mut acc[h.patch]);
            }
        }
        Compositing::Opacity => {
            let mut num = bg.map(|b| b * eps);
            let mut den = eps;
            for h in hits {
                let p = &patches[h.patch];
                let w = p.order * h.s.value[3];
                for c in 0..3 {
                    num[c] += w * p.mult[c] * h.s.value[c];
                }
                den += w;
            }
            let img = num.map(|v| v / den);
            let gd = g.map(|v| v / den);
            for h in hits {
                let p = &patches[h.patch];
                let (a, rgb) = (h.s.value[3], &h.s.value);
                let w = p.order * a;
                let mut dw = 0.0;
                let mut drgb = [0.0; 3];
                for c in 0..3 {
                    dw += gd[c] * (p.mult[c] * rgb[c] - img[c]);
                    drgb[c] = gd[c] * w * p.mult[c];
                    acc[h.patch].d_mult[c] += gd[c] * w * rgb[c];
                }
                acc[h.patch].d_order += dw * a;
                push_spatial(p, h, dw * p.order, drgb, &mut acc[h.patch]);
            }
        }
    }
}

/// Chains sample gradients through the texture lookup and `u = M^-1 p`,
/// accumulating `-(M^-1)^T g_u (u, 1)^T` so that `dL/dRaw_k` is its
/// contraction with `dM/dRaw_k`.
#[inline]
fn push_spatial(
    p: &Prepared<'_>,
    h: &Hit,
    d_alpha: f64,
    d_rgb: [f64; 3],
    acc: &mut Accum,
) {
    let s = &h.s;
    let mut gx = d_alpha * s.d_dx[3];
    let mut gy = d_alpha * s.d_dy[3];
    for c in 0..3 {
        gx += d_rgb[c] * s.d_dx[c];
        gy += d_rgb[c] * s.d_dy[c];
    }
    if gx == 0.0 && gy == 0.0 {
        return;
    }
    let gux = gx * p.half_long;
    let guy = gy * p.half_long;
    let m = &p.inv;
    let q0 = -(m[0][0] * gux + m[1][0] * guy);
    let q1 = -(m[0][1] * gux + m[1][1] * guy);
    let v = [h.ux, h.uy, 1.0];
    for c in 0..3 {
        acc.outer[0][c] += q0 * v[c];
        acc.outer[1][c] += q1 * v[c];
    }
}

/// Topmost patch at a canvas pixel for the given render size.
pub fn hit_test(
    genome: &CollageGenome,
    library: &PatchLibrary,
    pixel: (i64, i64),
    resolution: (usize, usize),
) -> Result<Option<usize>> {
    let (width, height) = resolution;
    let (x, y) = pixel;
    if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
        return Err(Error::OutOfBounds { x, y, width, height });
    }
    let (x, y) = (x as usize, y as usize);
    let frame = Frame::new(width, height);
    let patches = prepare(genome, library, &frame)?;
    let (nx, ny) = frame.norm(x, y);
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, p) in patches.iter().enumerate() {
        if !p.covers(x, y) {
            continue;
        }
        let (ux, uy) = p.patch_coords(nx, ny);
        let a = p.sample(ux, uy, false).value[3];
        let weight = match genome.mode.compositing {
            Compositing::Opacity => p.order * a,
            _ => a,
        };
        if weight < HIT_THRESHOLD {
            continue;
        }
        // Later indices win remaining ties, hence >=.
        let better = match best {
            None => true,
            Some((_, bw, bo)) => weight > bw || (weight == bw && p.order >= bo),
        };
        if better {
            best = Some((i, weight, p.order));
        }
    }
    Ok(best.map(|b| b.0))
}

/// Canvas-pixel axis-aligned bounds of a patch's opaque footprint at
/// `resolution`, or `None` when it has no visible pixel.
pub fn footprint(
    genome: &CollageGenome,
    library: &PatchLibrary,
    index: usize,
    resolution: (usize, usize),
) -> Result<Option<(usize, usize, usize, usize)>> {
    let (width, height) = resolution;
    let frame = Frame::new(width, height);
    let patches = prepare(genome, library, &frame)?;
    let p = patches
        .get(index)
        .ok_or_else(|| Error::NotFound(format!("patch index {index}")))?;
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in p.bbox.2..p.bbox.3 {
        for x in p.bbox.0..p.bbox.1 {
            let (nx, ny) = frame.norm(x, y);
            let (ux, uy) = p.patch_coords(nx, ny);
            if p.sample(ux, uy, false).value[3] >= HIT_THRESHOLD {
                bounds = Some(match bounds {
                    None => (x, x, y, y),
                    Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
                });
            }
        }
    }
    Ok(bounds)
}
