use collage_core::genome::{CollageGenome, Compositing};
use collage_core::image::{RgbImage, RgbaImage};
use collage_core::patches::PatchLibrary;
use collage_core::transforms::{build_matrix, invert_matrix, sigmoid, squash};

/// Straightforward per-pixel reference: every patch is sampled at every
/// pixel and the mode formula is applied directly.
pub fn reference_render(g: &CollageGenome, lib: &PatchLibrary) -> RgbImage {
    let (w, h) = (g.canvas.width, g.canvas.height);
    let long = w.max(h);
    let eps = g.mode.epsilon;
    let bg = g.canvas.background;
    let samples: Vec<_> = g
        .states
        .iter()
        .map(|s| {
            let tex = lib.patches[s.patch_id].level_for(long).clone();
            let inv = invert_matrix(&build_matrix(&squash(&s.affine, g.base_scale))).unwrap();
            (tex, inv, s.color.multipliers(), sigmoid(s.order_raw))
        })
        .collect();
    RgbImage::from_fn(w, h, |x, y| {
        let nx = (2.0 * x as f64 + 1.0 - w as f64) / long as f64;
        let ny = (2.0 * y as f64 + 1.0 - h as f64) / long as f64;
        let per_patch: Vec<([f64; 4], [f64; 3], f64)> = samples
            .iter()
            .map(|(tex, inv, mult, order)| {
                let (ux, uy) = inv.apply(nx, ny);
                let half = tex.width.max(tex.height) as f64 / 2.0;
                let px = ux * half + (tex.width as f64 / 2.0 - 0.5);
                let py = uy * half + (tex.height as f64 / 2.0 - 0.5);
                (reference_bilinear(tex, px, py), *mult, *order)
            })
            .collect();
        match g.mode.compositing {
            Compositing::Transparency => {
                let mut acc = bg;
                for (s, m, _) in &per_patch {
                    for c in 0..3 {
                        acc[c] += s[3] * m[c] * s[c];
                    }
                }
                acc.map(|v| v.clamp(0.0, 1.0))
            }
            Compositing::MaskedTransparency => {
                let mut num = bg.map(|b| b * eps);
                let mut den = eps;
                for (s, m, _) in &per_patch {
                    for c in 0..3 {
                        num[c] += s[3] * m[c] * s[c];
                    }
                    den += s[3];
                }
                num.map(|v| v / den)
            }
            Compositing::Opacity => {
                let mut num = bg.map(|b| b * eps);
                let mut den = eps;
                for (s, m, order) in &per_patch {
                    let wgt = order * s[3];
                    for c in 0..3 {
                        num[c] += wgt * m[c] * s[c];
                    }
                    den += wgt;
                }
                num.map(|v| v / den)
            }
        }
    })
}

pub fn reference_bilinear(tex: &RgbaImage, px: f64, py: f64) -> [f64; 4] {
    let texel = |x: f64, y: f64| -> [f64; 4] {
        if x < 0.0 || y < 0.0 || x >= tex.width as f64 || y >= tex.height as f64 {
            [0.0; 4]
        } else {
            tex.pixel(x as usize, y as usize).map(f64::from)
        }
    };
    if !(px > -1.0 && py > -1.0 && px < tex.width as f64 && py < tex.height as f64) {
        return [0.0; 4];
    }
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let (a, b, c, d) = (texel(x0, y0), texel(x0 + 1.0, y0), texel(x0, y0 + 1.0), texel(x0 + 1.0, y0 + 1.0));
    std::array::from_fn(|k| {
        (1.0 - fx) * (1.0 - fy) * a[k] + fx * (1.0 - fy) * b[k] + (1.0 - fx) * fy * c[k] + fx * fy * d[k]
    })
}
