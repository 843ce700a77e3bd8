//! Patch library: loading, corner flood-fill segmentation and mip chains.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::RgbaImage;

/// One cut-out image with its mip chain, highest resolution first.
#[derive(Clone, Debug)]
pub struct Patch {
    pub id: usize,
    pub name: String,
    pub levels: Vec<RgbaImage>,
    pub source_path: String,
}

impl Patch {
    /// Builds the halving chain until the largest side is `<= target_lo_res`.
    pub fn new(id: usize, name: impl Into<String>, image: RgbaImage, target_lo_res: usize) -> Self {
        let target = target_lo_res.max(1);
        let mut levels = vec![image];
        while levels.last().unwrap().max_dim() > target {
            let next = levels.last().unwrap().half();
            levels.push(next);
        }
        Self {
            id,
            name: name.into(),
            levels,
            source_path: String::new(),
        }
    }

    pub fn original(&self) -> &RgbaImage {
        &self.levels[0]
    }

    /// Highest-resolution level whose larger side fits in `max_dim`, or the
    /// smallest level when none fits.
    pub fn level_for(&self, max_dim: usize) -> &RgbaImage {
        self.levels
            .iter()
            .find(|l| l.max_dim() <= max_dim)
            .unwrap_or_else(|| self.levels.last().unwrap())
    }
}

/// A file that could not be decoded during [`load_library`].
#[derive(Clone, Debug)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct PatchLibrary {
    pub patches: Vec<Patch>,
    pub skipped: Vec<SkippedFile>,
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub target_lo_res: usize,
    pub flood_fill_tolerance: Option<f64>,
}

impl PatchLibrary {
    pub fn from_images(images: Vec<(String, RgbaImage)>, target_lo_res: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::NoPatches(PathBuf::new()));
        }
        let patches = images
            .into_iter()
            .enumerate()
            .map(|(id, (name, img))| Patch::new(id, name, img, target_lo_res))
            .collect();
        Ok(Self {
            patches,
            skipped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Patch> {
        self.patches.get(id)
    }

    /// SHA-256 over names, dimensions and level-0 pixel bits. Used to refuse
    /// checkpoints taken against different patches.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.patches.len() as u64).to_le_bytes());
        for p in &self.patches {
            let img = p.original();
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((img.width as u64).to_le_bytes());
            h.update((img.height as u64).to_le_bytes());
            for v in &img.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn decode_rgba(path: &Path) -> Result<RgbaImage> {
    let img = image::open(path).map_err(|e| Error::Codec(e.to_string()))?;
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Codec("empty image".into()));
    }
    Ok(RgbaImage::from_rgba8(w, h, rgba.as_raw()))
}

/// Loads every `.png` in `dir`, sorted by file name so ids are stable.
/// Undecodable files are skipped with a warning; the call fails only when
/// nothing could be loaded.
pub fn load_library(dir: &Path, opts: LoadOptions) -> Result<PatchLibrary> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|_| Error::NoPatches(dir.to_path_buf()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && is_png(p))
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let mut patches = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        match decode_rgba(&path) {
            Ok(mut img) => {
                if let Some(tol) = opts.flood_fill_tolerance {
                    if img.width >= 2 && img.height >= 2 {
                        img = flood_fill_segment(&img, tol);
                    }
                }
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let mut patch = Patch::new(patches.len(), name, img, opts.target_lo_res);
                patch.source_path = path.display().to_string();
                patches.push(patch);
            }
            Err(e) => {
                tracing::warn!("skipping {}: {e}", path.display());
                skipped.push(SkippedFile {
                    path,
                    reason: e.to_string(),
                });
            }
        }
    }
    if patches.is_empty() {
        return Err(Error::NoPatches(dir.to_path_buf()));
    }
    Ok(PatchLibrary { patches, skipped })
}

fn rgb_distance(a: [f32; 4], b: [f32; 4]) -> f64 {
    let dr = f64::from(a[0]) - f64::from(b[0]);
    let dg = f64::from(a[1]) - f64::from(b[1]);
    let db = f64::from(a[2]) - f64::from(b[2]);
    (dr * dr + dg * dg + db * db).sqrt()
}

/// Clears alpha on every pixel 4-connected to one of the image corners
/// through pixels whose RGB distance to that corner's colour is within
/// `tolerance`. Colour channels are left untouched.
pub fn flood_fill_segment(image: &RgbaImage, tolerance: f64) -> RgbaImage {
    let tol = tolerance.clamp(0.0, 1.0);
    let (w, h) = (image.width, image.height);
    let mut background = vec![false; w * h];
    let corners = [(0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)];
    for &(cx, cy) in &corners {
        let reference = image.pixel(cx, cy);
        let mut seen = vec![false; w * h];
        let mut queue = VecDeque::from([(cx, cy)]);
        seen[cy * w + cx] = true;
        while let Some((x, y)) = queue.pop_front() {
            if rgb_distance(image.pixel(x, y), reference) > tol {
                continue;
            }
            background[y * w + x] = true;
            let mut push = |nx: usize, ny: usize| {
                if !seen[ny * w + nx] {
                    seen[ny * w + nx] = true;
                    queue.push_back((nx, ny));
                }
            };
            if x > 0 {
                push(x - 1, y);
            }
            if x + 1 < w {
                push(x + 1, y);
            }
            if y > 0 {
                push(x, y - 1);
            }
            if y + 1 < h {
                push(x, y + 1);
            }
        }
    }
    let mut out = image.clone();
    for (i, bg) in background.into_iter().enumerate() {
        if bg {
            out.data[i * 4 + 3] = 0.0;
        }
    }
    out
}
