use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critics::remote::DEFAULT_TIMEOUT;
use crate::critics::{validate_geometry, CriticSpec, LossAggregation, RegionLayout};
use crate::error::{Error, Result};
use crate::genome::{CanvasSpec, Compositing, RenderMode};
use crate::image::decode_png_rgb;
use crate::optimizer::{EvolutionConfig, OptimizerConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Prompts {
    pub global: String,
    /// Row-major, one per region. Falls back to `global` when absent.
    pub grid: Option<Vec<String>>,
}

/// What each region critic is built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriticTemplate {
    /// Every region is compared with the matching crop of a `C x C` PNG.
    TargetImage { path: PathBuf },
    /// Seeded projection critic; the prompt text perturbs the seed.
    PseudoEmbedding {
        #[serde(default)]
        seed: u64,
    },
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: f64,
    },
}

fn default_timeout_secs() -> f64 {
    DEFAULT_TIMEOUT.as_secs_f64()
}

impl Default for CriticTemplate {
    fn default() -> Self {
        CriticTemplate::PseudoEmbedding { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub patch_dir: PathBuf,
    pub out_dir: PathBuf,
    pub prompts: Prompts,
    /// Side of the square canvas.
    pub canvas: usize,
    pub grid: usize,
    pub crop: usize,
    pub include_global: bool,
    pub background: [f64; 3],
    pub mode: RenderMode,
    pub agg: LossAggregation,
    /// Patches per genome.
    pub num_patches: usize,
    /// Patch half-extent at effective scale 1, in normalised canvas units.
    pub base_scale: f64,
    /// Smallest mip level kept per patch.
    pub target_lo_res: usize,
    pub flood_fill_tolerance: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub evolution: EvolutionConfig,
    pub critic: CriticTemplate,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            patch_dir: PathBuf::from("patches"),
            out_dir: PathBuf::from("out"),
            prompts: Prompts::default(),
            canvas: 448,
            grid: 3,
            crop: 224,
            include_global: true,
            background: [0.0; 3],
            mode: RenderMode::new(Compositing::MaskedTransparency),
            agg: LossAggregation::Arithmetic,
            num_patches: 16,
            base_scale: 0.25,
            target_lo_res: 64,
            flood_fill_tolerance: None,
            optimizer: OptimizerConfig::default(),
            evolution: EvolutionConfig::default(),
            critic: CriticTemplate::default(),
        }
    }
}

impl SessionConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Parses a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.patch_dir);
        fix(&mut self.out_dir);
        if let CriticTemplate::TargetImage { path } = &mut self.critic {
            fix(path);
        }
    }

    pub fn canvas_spec(&self) -> CanvasSpec {
        CanvasSpec {
            background: self.background,
            ..CanvasSpec::new(self.canvas, self.canvas)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.canvas_spec().validate()?;
        validate_geometry(self.grid, self.crop, self.canvas, self.include_global)?;
        if let Some(grid) = &self.prompts.grid {
            if grid.len() != self.grid * self.grid {
                return Err(Error::InvalidConfig(format!(
                    "{} region prompts for a {g}x{g} grid",
                    grid.len(),
                    g = self.grid
                )));
            }
        }
        if !(self.mode.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if self.num_patches == 0 {
            return Err(Error::InvalidConfig("num_patches must be >= 1".into()));
        }
        if !(self.base_scale > 0.0 && self.base_scale.is_finite()) {
            return Err(Error::InvalidConfig("base_scale must be positive".into()));
        }
        if self.target_lo_res == 0 {
            return Err(Error::InvalidConfig("target_lo_res must be >= 1".into()));
        }
        if let CriticTemplate::Remote { endpoint, timeout_secs } = &self.critic {
            if !(*timeout_secs > 0.0 && timeout_secs.is_finite()) {
                return Err(Error::InvalidConfig("critic timeout must be positive".into()));
            }
            // The client is plain HTTP; the sidecar runs locally.
            if !endpoint.starts_with("http://") {
                return Err(Error::InvalidConfig(format!("critic endpoint must be an http:// URL, got {endpoint:?}")));
            }
        }
        self.optimizer.validate()?;
        self.evolution.validate()
    }

    pub fn region_prompt(&self, region: usize) -> &str {
        match &self.prompts.grid {
            Some(grid) => &grid[region],
            None => &self.prompts.global,
        }
    }

    /// Builds the critic layout described by this config.
    pub fn layout(&self) -> Result<RegionLayout> {
        self.validate()?;
        let regions = self.grid * self.grid;
        let (region_critics, global_critic) = match &self.critic {
            CriticTemplate::TargetImage { path } => {
                let target = decode_png_rgb(&std::fs::read(path)?)?;
                target.check_shape(self.canvas, self.canvas)?;
                let probe = RegionLayout::new(
                    self.grid,
                    self.crop,
                    self.canvas,
                    vec![CriticSpec::PseudoEmbedding { seed: 0 }; regions],
                    None,
                )?;
                let crops = probe
                    .offsets()
                    .into_iter()
                    .map(|(x, y)| CriticSpec::TargetImage {
                        target: target.crop(x, y, self.crop),
                    })
                    .collect();
                let global = self.include_global.then(|| CriticSpec::TargetImage {
                    target: target.box_downsample(self.canvas / self.crop),
                });
                (crops, global)
            }
            CriticTemplate::PseudoEmbedding { seed } => {
                let make = |prompt: &str| CriticSpec::PseudoEmbedding {
                    seed: seed ^ prompt_hash(prompt),
                };
                let crops = (0..regions).map(|r| make(self.region_prompt(r))).collect();
                (crops, self.include_global.then(|| make(&self.prompts.global)))
            }
            CriticTemplate::Remote {
                endpoint,
                timeout_secs,
            } => {
                let make = |prompt: &str| CriticSpec::Remote {
                    endpoint: endpoint.clone(),
                    prompt: prompt.to_string(),
                    timeout: Duration::from_secs_f64(*timeout_secs),
                };
                let crops = (0..regions).map(|r| make(self.region_prompt(r))).collect();
                (crops, self.include_global.then(|| make(&self.prompts.global)))
            }
        };
        RegionLayout::new(self.grid, self.crop, self.canvas, region_critics, global_critic)
    }
}

/// First eight bytes of the prompt's SHA-256, little-endian. The empty
/// prompt maps to 0 so a bare seed means what it says.
pub fn prompt_hash(prompt: &str) -> u64 {
    if prompt.is_empty() {
        return 0;
    }
    let digest = Sha256::digest(prompt.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
