//! Plain pixel containers.
//!
//! Patches are stored as `f32` RGBA in `[0, 1]`. Rendered canvases are `f64`
//! RGB so that finite-difference checks and gradient accumulation do not lose
//! precision; they are quantised only when exported.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `H x W x 4` image with straight (non-premultiplied) alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbaImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbaImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 4],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 4]) -> Self {
        let mut data = Vec::with_capacity(width * height * 4);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// Converts 8-bit RGBA bytes to unit-interval floats.
    pub fn from_rgba8(width: usize, height: usize, bytes: &[u8]) -> Self {
        debug_assert_eq!(bytes.len(), width * height * 4);
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 4] {
        let i = (y * self.width + x) * 4;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, px: [f32; 4]) {
        let i = (y * self.width + x) * 4;
        self.data[i..i + 4].copy_from_slice(&px);
    }

    pub fn max_dim(&self) -> usize {
        self.width.max(self.height)
    }

    /// 2x2 box filter producing `ceil(w/2) x ceil(h/2)`. On odd edges the
    /// average runs over the source pixels that exist.
    pub fn half(&self) -> RgbaImage {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut out = RgbaImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 4];
                let mut n = 0.0f32;
                for sy in 2 * y..(2 * y + 2).min(self.height) {
                    for sx in 2 * x..(2 * x + 2).min(self.width) {
                        let p = self.pixel(sx, sy);
                        for c in 0..4 {
                            acc[c] += p[c];
                        }
                        n += 1.0;
                    }
                }
                out.set_pixel(x, y, acc.map(|v| v / n));
            }
        }
        out
    }
}

/// Row-major `H x W x 3` image. Also used as the layout of `dLoss/dImage`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height || self.data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height}x3"),
                actual: format!("{}x{}x3 ({} values)", self.width, self.height, self.data.len()),
            });
        }
        Ok(())
    }

    /// Copies the `size x size` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> RgbImage {
        let mut out = RgbImage::new(size, size);
        for y in 0..size {
            let src = ((y0 + y) * self.width + x0) * 3;
            let dst = y * size * 3;
            out.data[dst..dst + size * 3].copy_from_slice(&self.data[src..src + size * 3]);
        }
        out
    }

    /// Box downsampling by an integer factor.
    pub fn box_downsample(&self, factor: usize) -> RgbImage {
        assert!(factor >= 1 && self.width.is_multiple_of(factor) && self.height.is_multiple_of(factor));
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for sy in y * factor..(y + 1) * factor {
                    for sx in x * factor..(x + 1) * factor {
                        let p = self.pixel(sx, sy);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                let i = (y * w + x) * 3;
                for c in 0..3 {
                    out.data[i + c] = acc[c] * norm;
                }
            }
        }
        out
    }

    /// Adjoint of [`RgbImage::box_downsample`]: scatters each value uniformly
    /// over its `factor x factor` source block.
    pub fn box_upsample_adjoint(&self, factor: usize) -> RgbImage {
        let (w, h) = (self.width * factor, self.height * factor);
        let norm = 1.0 / (factor * factor) as f64;
        RgbImage::from_fn(w, h, |x, y| {
            let p = self.pixel(x / factor, y / factor);
            [p[0] * norm, p[1] * norm, p[2] * norm]
        })
    }

    pub fn mse(&self, other: &RgbImage) -> f64 {
        assert!(self.same_shape(other));
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        sum / self.data.len() as f64
    }

    /// Peak signal-to-noise ratio in dB for unit-range images.
    pub fn psnr(&self, other: &RgbImage) -> f64 {
        let mse = self.mse(other);
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }

    /// 8-bit quantisation, round-half-to-even after clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8)
            .collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            encoder,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Codec(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_f32_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_f32_le_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<RgbImage> {
        let expected = width * height * 3 * 4;
        if bytes.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} bytes"),
                actual: format!("{} bytes", bytes.len()),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(RgbImage { width, height, data })
    }
}

pub fn decode_png_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Codec(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(RgbImage {
        width: w,
        height: h,
        data: rgb.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect(),
    })
}
