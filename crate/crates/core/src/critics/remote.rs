//! Client side of the remote critic wire protocol.
//!
//! ```text
//! POST {endpoint}/score
//! X-Critic-Proto: 1
//! { "width", "height", "prompt", "pixels_b64", "need_grad": true }
//! -> { "loss", "grad_b64" }
//! ```
//!
//! Pixels and gradients travel as base64 of little-endian `f32`, row-major
//! `H x W x 3`, so the sidecar differentiates exactly the pixels that were
//! rendered.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{check_finite, CriticOutput};
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const PROTO_HEADER: &str = "X-Critic-Proto";
pub const PROTO_VERSION: &str = "1";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub width: usize,
    pub height: usize,
    pub prompt: String,
    pub pixels_b64: String,
    pub need_grad: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub loss: f64,
    pub grad_b64: String,
}

impl ScoreRequest {
    pub fn new(prompt: &str, image: &RgbImage) -> Self {
        Self {
            width: image.width,
            height: image.height,
            prompt: prompt.to_string(),
            pixels_b64: B64.encode(image.to_f32_le_bytes()),
            need_grad: true,
        }
    }

    pub fn decode_pixels(&self) -> Result<RgbImage> {
        let bytes = B64
            .decode(&self.pixels_b64)
            .map_err(|e| Error::ProtocolError(format!("pixels_b64: {e}")))?;
        RgbImage::from_f32_le_bytes(self.width, self.height, &bytes)
            .map_err(|e| Error::ProtocolError(e.to_string()))
    }
}

impl ScoreResponse {
    pub fn new(loss: f64, grad: &RgbImage) -> Self {
        Self {
            loss,
            grad_b64: B64.encode(grad.to_f32_le_bytes()),
        }
    }

    /// Validates the payload against the request dimensions.
    pub fn decode(&self, width: usize, height: usize) -> Result<CriticOutput> {
        let bytes = B64
            .decode(&self.grad_b64)
            .map_err(|e| Error::ProtocolError(format!("grad_b64: {e}")))?;
        let grad = RgbImage::from_f32_le_bytes(width, height, &bytes)
            .map_err(|e| Error::ProtocolError(e.to_string()))?;
        let out = CriticOutput {
            loss: self.loss,
            grad,
        };
        check_finite(&out)?;
        Ok(out)
    }
}

pub fn score_url(endpoint: &str) -> String {
    format!("{}/score", endpoint.trim_end_matches('/'))
}

/// Sends one image to the sidecar. Transport failures and non-200 replies
/// map to `CriticUnavailable`; malformed replies to `ProtocolError`.
pub fn score(endpoint: &str, prompt: &str, image: &RgbImage, timeout: Duration) -> Result<CriticOutput> {
    let body = serde_json::to_string(&ScoreRequest::new(prompt, image))
        .map_err(|e| Error::ProtocolError(e.to_string()))?;
    let agent = ureq::AgentBuilder::new().timeout(timeout).build();
    let response = agent
        .post(&score_url(endpoint))
        .set(PROTO_HEADER, PROTO_VERSION)
        .set("Content-Type", "application/json")
        .send_string(&body);
    let text = match response {
        Ok(r) if r.status() == 200 => r
            .into_string()
            .map_err(|e| Error::CriticUnavailable(format!("reading response: {e}")))?,
        Ok(r) => return Err(Error::CriticUnavailable(format!("HTTP {}", r.status()))),
        Err(ureq::Error::Status(code, _)) => {
            return Err(Error::CriticUnavailable(format!("HTTP {code}")))
        }
        Err(e) => return Err(Error::CriticUnavailable(e.to_string())),
    };
    let parsed: ScoreResponse =
        serde_json::from_str(&text).map_err(|e| Error::ProtocolError(e.to_string()))?;
    parsed.decode(image.width, image.height)
}
