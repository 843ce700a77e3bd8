use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use collage_core::critics::LossAggregation;
use collage_core::genome::{Compositing, RenderMode};
use collage_core::optimizer::write_trace_csv;
use collage_core::session::{ControlAction, CriticTemplate, Phase, Session, SessionConfig};

#[derive(Debug, Parser)]
#[command(name = "collage-forge", version, about = "Evolve patch collages against a critic")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a session headless to completion and write the results.
    Run(RunArgs),
    /// Serve the session HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML session file. Flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Also export the final collage at this square size.
    #[arg(long)]
    pub export_size: Option<usize>,
    /// Restore this checkpoint before running.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Save a checkpoint here when the run ends.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Log progress every this many steps.
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8700)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Allow more than one live session at a time.
    #[arg(long)]
    pub multi_session: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Transparency,
    MaskedTransparency,
    Opacity,
}

impl From<ModeArg> for Compositing {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Transparency => Compositing::Transparency,
            ModeArg::MaskedTransparency => Compositing::MaskedTransparency,
            ModeArg::Opacity => Compositing::Opacity,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AggArg {
    Arithmetic,
    Harmonic,
}

impl From<AggArg> for LossAggregation {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Arithmetic => LossAggregation::Arithmetic,
            AggArg::Harmonic => LossAggregation::Harmonic,
        }
    }
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub patch_dir: Option<PathBuf>,
    /// Global prompt, also used for regions without their own.
    #[arg(long)]
    pub prompt: Option<String>,
    /// Region prompts in row-major order, separated by `|`.
    #[arg(long, value_delimiter = '|')]
    pub prompts_grid: Option<Vec<String>>,
    #[arg(long)]
    pub canvas: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub agg: Option<AggArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Population size; 1 turns evolution off.
    #[arg(long)]
    pub pop: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Score with a remote critic at this URL.
    #[arg(long)]
    pub critic_endpoint: Option<String>,
    /// Write the loss trace CSV here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub flood_fill_tolerance: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut SessionConfig) {
        if let Some(p) = &self.patch_dir {
            cfg.patch_dir = p.clone();
        }
        if let Some(p) = &self.prompt {
            cfg.prompts.global = p.clone();
        }
        if let Some(g) = &self.prompts_grid {
            cfg.prompts.grid = Some(g.clone());
        }
        if let Some(c) = self.canvas {
            cfg.canvas = c;
        }
        if let Some(g) = self.grid {
            cfg.grid = g;
        }
        if let Some(k) = self.crop {
            cfg.crop = k;
        }
        if let Some(m) = self.mode {
            cfg.mode = RenderMode {
                compositing: m.into(),
                ..cfg.mode
            };
        }
        if let Some(a) = self.agg {
            cfg.agg = a.into();
        }
        if let Some(s) = self.steps {
            cfg.optimizer.steps = s;
        }
        if let Some(p) = self.pop {
            cfg.evolution.population = p;
            cfg.evolution.enabled = p > 1;
        }
        if let Some(s) = self.seed {
            cfg.optimizer.seed = s;
        }
        if let Some(e) = &self.critic_endpoint {
            let timeout_secs = match cfg.critic {
                CriticTemplate::Remote { timeout_secs, .. } => timeout_secs,
                _ => collage_core::critics::remote::DEFAULT_TIMEOUT.as_secs_f64(),
            };
            cfg.critic = CriticTemplate::Remote {
                endpoint: e.clone(),
                timeout_secs,
            };
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(t) = self.flood_fill_tolerance {
            cfg.flood_fill_tolerance = Some(t);
        }
    }
}

pub fn build_config(config: Option<&PathBuf>, overrides: &Overrides) -> anyhow::Result<SessionConfig> {
    let mut cfg = match config {
        Some(path) => SessionConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => SessionConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Files written by a headless run.
#[derive(Debug)]
pub struct RunOutput {
    pub final_png: PathBuf,
    pub export: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub best_loss: Option<f64>,
}

pub fn run(args: &RunArgs) -> anyhow::Result<RunOutput> {
    let cfg = build_config(args.config.as_ref(), &args.overrides)?;
    let mut session = Session::new(cfg.clone())?;
    if let Some(path) = &args.resume {
        session
            .load_checkpoint(path)
            .with_context(|| format!("resuming from {}", path.display()))?;
    }
    let every = args.log_every.max(1);
    while session.phase() == Phase::Paused {
        let state = session.control(ControlAction::StepN { n: every })?;
        tracing::info!(step = state.step, best = ?state.best_loss, "progress");
    }
    if session.phase() == Phase::Error {
        bail!("session failed: {}", session.state().last_error.unwrap_or_default());
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    let snapshot = session.snapshot()?;
    let final_png = cfg.out_dir.join("collage_final.png");
    std::fs::write(&final_png, &snapshot.png)?;
    let export = match args.export_size {
        Some(n) => Some(cfg.out_dir.join(session.export_hires(n, n)?.file)),
        None => None,
    };
    let trace = match &args.overrides.trace {
        Some(path) => {
            write_trace_csv(session.trace(), path)?;
            Some(path.clone())
        }
        None => None,
    };
    let checkpoint = match &args.checkpoint {
        Some(path) => Some(session.save_checkpoint(path)?),
        None => None,
    };
    Ok(RunOutput {
        final_png,
        export,
        trace,
        checkpoint,
        best_loss: session.state().best_loss,
    })
}
