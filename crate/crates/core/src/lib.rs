//! Differentiable patch collages: patch library, pose transforms, renderer,
//! critics, evolutionary optimizer and the interactive session engine.

pub mod critics;
pub mod error;
pub mod genome;
pub mod image;
pub mod optimizer;
pub mod patches;
pub mod render;
pub mod session;
pub mod transforms;

pub use error::{Error, Result};
pub use genome::{CanvasSpec, CollageGenome, Compositing, GradientBundle, PatchState, RenderMode};
pub use image::{RgbImage, RgbaImage};
pub use patches::{load_library, LoadOptions, Patch, PatchLibrary};
