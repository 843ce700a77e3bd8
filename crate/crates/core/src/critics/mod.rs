//! Critics score a rendered image and return `dLoss/dImage`.
//!
//! All losses are strictly positive so that harmonic aggregation is always
//! defined: MSE carries a `1e-12` floor and cosine critics report
//! `1 - cos` in `(0, 2]`.

mod layout;
pub mod remote;

use std::time::Duration;

pub use layout::{
    aggregate, evaluate_layout, validate_geometry, CriticReport, LossAggregation, RegionLayout,
};

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Added to MSE so the loss stays positive at a perfect match.
pub const MSE_FLOOR: f64 = 1e-12;
/// Output dimension of the pseudo-embedding projection.
pub const EMBED_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum CriticSpec {
    /// Mean squared error against a fixed image of the same size.
    TargetImage { target: RgbImage },
    /// `1 - cos(P x, e)` for a seeded random projection `P` and unit vector
    /// `e`; a deterministic, model-free stand-in for a text encoder.
    PseudoEmbedding { seed: u64 },
    /// Dual-encoder sidecar reached over HTTP.
    Remote {
        endpoint: String,
        prompt: String,
        timeout: Duration,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticOutput {
    pub loss: f64,
    pub grad: RgbImage,
}

pub fn evaluate(critic: &CriticSpec, image: &RgbImage) -> Result<CriticOutput> {
    match critic {
        CriticSpec::TargetImage { target } => target_mse(target, image),
        CriticSpec::PseudoEmbedding { seed } => pseudo_embedding(*seed, image),
        CriticSpec::Remote {
            endpoint,
            prompt,
            timeout,
        } => remote::score(endpoint, prompt, image, *timeout),
    }
}

fn target_mse(target: &RgbImage, image: &RgbImage) -> Result<CriticOutput> {
    image.check_shape(target.width, target.height)?;
    let n = image.data.len() as f64;
    let mut sum = 0.0;
    let mut grad = RgbImage::new(image.width, image.height);
    for ((g, &i), &t) in grad.data.iter_mut().zip(&image.data).zip(&target.data) {
        let d = i - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok(CriticOutput {
        loss: sum / n + MSE_FLOOR,
        grad,
    })
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn unit_uniform(state: &mut u64) -> f64 {
    ((splitmix64(state) >> 11) as f64) * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0
}

/// Column `j` of the projection matrix. Generated on demand so images of
/// any size can be scored without storing `64 x H*W*3` entries.
#[inline]
fn projection_column(seed: u64, j: usize, out: &mut [f64; EMBED_DIM]) {
    let mut state = seed ^ (j as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    splitmix64(&mut state);
    for v in out.iter_mut() {
        *v = unit_uniform(&mut state);
    }
}

/// The seeded unit target vector.
pub fn pseudo_target(seed: u64) -> [f64; EMBED_DIM] {
    let mut state = seed ^ 0xA076_1D64_78BD_642F;
    let mut e = [0.0; EMBED_DIM];
    for v in e.iter_mut() {
        *v = unit_uniform(&mut state);
    }
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    e.map(|v| v / norm)
}

/// Projects the image into the pseudo-embedding space.
pub fn pseudo_embed(seed: u64, image: &RgbImage) -> [f64; EMBED_DIM] {
    let mut z = [0.0; EMBED_DIM];
    let mut col = [0.0; EMBED_DIM];
    for (j, &x) in image.data.iter().enumerate() {
        projection_column(seed, j, &mut col);
        for d in 0..EMBED_DIM {
            z[d] += col[d] * x;
        }
    }
    z
}

fn pseudo_embedding(seed: u64, image: &RgbImage) -> Result<CriticOutput> {
    let z = pseudo_embed(seed, image);
    let e = pseudo_target(seed);
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let dot: f64 = z.iter().zip(&e).map(|(a, b)| a * b).sum();
    let cos = dot / norm;
    // dL/dz for L = 1 - (z.e)/|z|
    let dz: [f64; EMBED_DIM] =
        std::array::from_fn(|d| -(e[d] / norm - dot * z[d] / (norm * norm * norm)));
    let mut grad = RgbImage::new(image.width, image.height);
    let mut col = [0.0; EMBED_DIM];
    for (j, g) in grad.data.iter_mut().enumerate() {
        projection_column(seed, j, &mut col);
        *g = col.iter().zip(&dz).map(|(p, d)| p * d).sum();
    }
    Ok(CriticOutput {
        loss: (1.0 - cos).max(MSE_FLOOR),
        grad,
    })
}

pub(crate) fn check_finite(out: &CriticOutput) -> Result<()> {
    if !out.loss.is_finite() || out.grad.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::ProtocolError("non-finite critic output".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn identical_target_gives_floor_loss_and_zero_grad() {
        let img = random_image(5, 4, 1);
        let out = evaluate(&CriticSpec::TargetImage { target: img.clone() }, &img).unwrap();
        assert!(out.loss <= MSE_FLOOR);
        assert!(out.grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_pixel_mse() {
        let img = RgbImage::filled(1, 1, [0.5; 3]);
        let target = RgbImage::filled(1, 1, [0.0; 3]);
        let out = evaluate(&CriticSpec::TargetImage { target }, &img).unwrap();
        assert!((out.loss - 0.25).abs() < 1e-11);
        for g in out.grad.data {
            assert!((g - 2.0 * 0.5 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn target_shape_mismatch_is_an_error() {
        let out = evaluate(
            &CriticSpec::TargetImage { target: RgbImage::new(4, 4) },
            &RgbImage::new(3, 4),
        );
        assert!(matches!(out, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn pseudo_embedding_is_reproducible() {
        let img = random_image(16, 16, 3);
        let a = evaluate(&CriticSpec::PseudoEmbedding { seed: 42 }, &img).unwrap();
        let b = evaluate(&CriticSpec::PseudoEmbedding { seed: 42 }, &img).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grad, b.grad);
        let c = evaluate(&CriticSpec::PseudoEmbedding { seed: 43 }, &img).unwrap();
        assert_ne!(a.loss, c.loss);
        assert!(a.loss > 0.0 && a.loss <= 2.0);
    }

    #[test]
    fn pseudo_embedding_gradient_matches_finite_differences() {
        let critic = CriticSpec::PseudoEmbedding { seed: 7 };
        for trial in 0..3 {
            let img = random_image(32, 32, 100 + trial);
            let out = evaluate(&critic, &img).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            for _ in 0..20 {
                let j = rng.random_range(0..img.data.len());
                let h = 1e-4;
                let mut plus = img.clone();
                plus.data[j] += h;
                let mut minus = img.clone();
                minus.data[j] -= h;
                let fd = (evaluate(&critic, &plus).unwrap().loss
                    - evaluate(&critic, &minus).unwrap().loss)
                    / (2.0 * h);
                let a = out.grad.data[j];
                let err = (fd - a).abs();
                assert!(err <= 1e-3 * fd.abs().max(a.abs()) || err <= 1e-9, "pixel {j}: fd {fd} vs {a}");
            }
        }
    }
}
