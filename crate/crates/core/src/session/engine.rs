use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, MemberRecord, PatchRecord};
use super::config::SessionConfig;
use crate::critics::RegionLayout;
use crate::error::{Error, Result};
use crate::genome::CanvasSpec;
use crate::optimizer::{Optimizer, TraceRow};
use crate::patches::{load_library, LoadOptions, PatchLibrary};
use crate::render::{hit_test, render_canvas, render_hires};
use crate::transforms::{from_human, to_human, HumanPose, PoseEdit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Running,
    Paused,
    Finished,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ControlAction {
    Run,
    Pause,
    StepN { n: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditCommand {
    pub genome_id: usize,
    pub patch_index: usize,
    pub pose: PoseEdit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub pose: HumanPose,
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub phase: Phase,
    pub step: usize,
    pub steps_total: usize,
    pub tournaments: usize,
    /// Genome shown by snapshots and targeted by hit tests.
    pub selected_genome: usize,
    pub best_loss: Option<f64>,
    pub member_losses: Vec<Option<f64>>,
    /// Lowest loss across the population at each completed step.
    pub loss_history: Vec<f64>,
    /// Poses of the selected genome's patches.
    pub poses: Vec<HumanPose>,
    pub last_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub genome_id: usize,
    pub png: Vec<u8>,
    pub poses: Vec<HumanPose>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub file: String,
    pub sha256: String,
    pub width: usize,
    pub height: usize,
    pub step: usize,
    pub genome_id: usize,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// One optimisation run plus everything a human needs to steer it. Purely
/// synchronous; [`super::SessionHandle`] adds the worker thread.
pub struct Session {
    config: SessionConfig,
    library: PatchLibrary,
    layout: RegionLayout,
    optimizer: Optimizer,
    phase: Phase,
    last_error: Option<String>,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Self> {
        config.validate()?;
        let library = load_library(
            &config.patch_dir,
            LoadOptions {
                target_lo_res: config.target_lo_res,
                flood_fill_tolerance: config.flood_fill_tolerance,
            },
        )?;
        Self::with_library(config, library)
    }

    pub fn with_library(config: SessionConfig, library: PatchLibrary) -> Result<Self> {
        let layout = config.layout()?;
        let optimizer = Optimizer::new(
            config.optimizer.clone(),
            config.evolution.clone(),
            &library,
            config.num_patches,
            config.mode,
            config.canvas_spec(),
            config.base_scale,
        )?;
        Ok(Self {
            config,
            library,
            layout,
            optimizer,
            phase: Phase::Paused,
            last_error: None,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn library(&self) -> &PatchLibrary {
        &self.library
    }

    pub fn layout(&self) -> &RegionLayout {
        &self.layout
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn step(&self) -> usize {
        self.optimizer.step
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.optimizer.trace
    }

    pub fn selected_genome(&self) -> usize {
        self.optimizer.population.best()
    }

    pub fn state(&self) -> SessionState {
        let members = &self.optimizer.population.members;
        let mut loss_history = Vec::with_capacity(self.optimizer.step);
        for row in &self.optimizer.trace {
            if row.genome_id == 0 {
                loss_history.push(row.loss);
            } else if let Some(last) = loss_history.last_mut() {
                *last = last.min(row.loss);
            }
        }
        let selected = self.selected_genome();
        SessionState {
            phase: self.phase,
            step: self.optimizer.step,
            steps_total: self.config.optimizer.steps,
            tournaments: self.optimizer.tournaments,
            selected_genome: selected,
            best_loss: members[selected].last_loss,
            member_losses: members.iter().map(|m| m.last_loss).collect(),
            loss_history,
            poses: self.poses(selected).unwrap_or_default(),
            last_error: self.last_error.clone(),
        }
    }

    fn phase_name(&self) -> String {
        format!("{:?}", self.phase)
    }

    /// One gradient step (plus tournament when due). Critic outages pause
    /// the session; any other failure moves it to `Error`.
    pub fn step_once(&mut self) -> Result<()> {
        if matches!(self.phase, Phase::Finished | Phase::Error) {
            return Err(Error::InvalidPhase(self.phase_name()));
        }
        match self.optimizer.advance(&self.library, &self.layout, self.config.agg) {
            Ok(_) => {
                if self.optimizer.is_finished() {
                    self.phase = Phase::Finished;
                }
                Ok(())
            }
            Err(e) => {
                self.phase = match e {
                    Error::CriticUnavailable(_) | Error::ProtocolError(_) => Phase::Paused,
                    _ => Phase::Error,
                };
                tracing::warn!("step {} failed: {e}", self.optimizer.step);
                self.last_error = Some(e.to_string());
                Err(e)
            }
        }
    }

    pub fn control(&mut self, action: ControlAction) -> Result<SessionState> {
        match action {
            ControlAction::Run => {
                if matches!(self.phase, Phase::Finished | Phase::Error) {
                    return Err(Error::InvalidPhase(self.phase_name()));
                }
                self.last_error = None;
                self.phase = Phase::Running;
            }
            ControlAction::Pause => {
                if self.phase == Phase::Running {
                    self.phase = Phase::Paused;
                }
            }
            ControlAction::StepN { n } => {
                if matches!(self.phase, Phase::Finished | Phase::Error) {
                    return Err(Error::InvalidPhase(self.phase_name()));
                }
                self.phase = Phase::Paused;
                self.last_error = None;
                for _ in 0..n {
                    self.step_once()?;
                    if self.phase != Phase::Paused {
                        break;
                    }
                }
            }
        }
        Ok(self.state())
    }

    /// Applies a partial human pose. Only allowed while paused; the edited
    /// patch's optimizer moments start over.
    pub fn apply_edit(&mut self, edit: &EditCommand) -> Result<EditOutcome> {
        match self.phase {
            Phase::Paused => {}
            Phase::Running => return Err(Error::EditWhileRunning),
            _ => return Err(Error::InvalidPhase(self.phase_name())),
        }
        let pop = &mut self.optimizer.population;
        let member = pop
            .members
            .get_mut(edit.genome_id)
            .ok_or_else(|| Error::NotFound(format!("genome {}", edit.genome_id)))?;
        let genome = &mut member.genome;
        let state = genome
            .states
            .get(edit.patch_index)
            .ok_or_else(|| Error::NotFound(format!("patch {}", edit.patch_index)))?;
        let (new_state, clamped) = from_human(&edit.pose, state, &genome.canvas, genome.base_scale);
        let pose = to_human(&new_state, &genome.canvas, genome.base_scale);
        genome.states[edit.patch_index] = new_state;
        member.moments[edit.patch_index] = Default::default();
        Ok(EditOutcome { pose, clamped })
    }

    pub fn poses(&self, genome_id: usize) -> Result<Vec<HumanPose>> {
        let g = &self.member_genome(genome_id)?;
        Ok(g.states.iter().map(|s| to_human(s, &g.canvas, g.base_scale)).collect())
    }

    fn member_genome(&self, genome_id: usize) -> Result<&crate::genome::CollageGenome> {
        self.optimizer
            .population
            .members
            .get(genome_id)
            .map(|m| &m.genome)
            .ok_or_else(|| Error::NotFound(format!("genome {genome_id}")))
    }

    /// Topmost patch of `genome_id` (default: the selected genome) at a
    /// canvas pixel.
    pub fn hit(&self, x: i64, y: i64, genome_id: Option<usize>) -> Result<Option<usize>> {
        let g = self.member_genome(genome_id.unwrap_or_else(|| self.selected_genome()))?;
        hit_test(g, &self.library, (x, y), (g.canvas.width, g.canvas.height))
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        let id = self.selected_genome();
        let g = self.member_genome(id)?;
        Ok(Snapshot {
            step: self.optimizer.step,
            genome_id: id,
            png: render_canvas(g, &self.library)?.encode_png()?,
            poses: self.poses(id)?,
        })
    }

    /// Renders the selected genome at `width x height` from the full
    /// resolution patches into `out_dir` and records its checksum in the
    /// manifest.
    pub fn export_hires(&self, width: usize, height: usize) -> Result<ExportRecord> {
        let id = self.selected_genome();
        let g = self.member_genome(id)?;
        let canvas: &CanvasSpec = &g.canvas;
        if width * canvas.height != height * canvas.width {
            return Err(Error::InvalidConfig(format!(
                "export {width}x{height} does not match the canvas aspect {}x{}",
                canvas.width, canvas.height
            )));
        }
        let png = render_hires(g, &self.library, width, height)?.encode_png()?;
        let out_dir = &self.config.out_dir;
        std::fs::create_dir_all(out_dir)?;
        let file = format!("collage_step{:06}_{width}x{height}.png", self.optimizer.step);
        std::fs::write(out_dir.join(&file), &png)?;
        let record = ExportRecord {
            file,
            sha256: hex(&Sha256::digest(&png)),
            width,
            height,
            step: self.optimizer.step,
            genome_id: id,
        };
        update_manifest(&out_dir.join(MANIFEST_NAME), &record)?;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let members = self
            .optimizer
            .population
            .members
            .iter()
            .map(|m| MemberRecord {
                last_loss: m.last_loss,
                patches: m
                    .genome
                    .states
                    .iter()
                    .zip(&m.moments)
                    .map(|(s, mo)| PatchRecord {
                        patch_id: s.patch_id,
                        params: s.params(),
                        moments: *mo,
                    })
                    .collect(),
            })
            .collect();
        Checkpoint {
            library_hash: self.library.content_hash(),
            step: self.optimizer.step,
            tournaments: self.optimizer.tournaments,
            rngs: self.optimizer.rngs.clone(),
            members,
            trace: self.optimizer.trace.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.checkpoint().encode())?;
        Ok(path.to_path_buf())
    }

    /// Replaces population, moments, random streams, counters and trace
    /// with the checkpoint's. The session ends up paused (or finished).
    pub fn restore(&mut self, ckpt: Checkpoint) -> Result<()> {
        if self.phase == Phase::Running {
            return Err(Error::InvalidPhase(self.phase_name()));
        }
        if ckpt.library_hash != self.library.content_hash() {
            return Err(Error::LibraryMismatch);
        }
        let pop = &self.optimizer.population;
        let shape_ok = ckpt.members.len() == pop.len()
            && ckpt.members.iter().all(|m| m.patches.len() == self.config.num_patches)
            && ckpt
                .members
                .iter()
                .flat_map(|m| &m.patches)
                .all(|p| p.patch_id < self.library.len());
        if !shape_ok {
            return Err(Error::InvalidConfig(
                "checkpoint population does not match this session's configuration".into(),
            ));
        }
        let opt = &mut self.optimizer;
        for (member, rec) in opt.population.members.iter_mut().zip(ckpt.members) {
            member.last_loss = rec.last_loss;
            for ((state, moments), p) in member.genome.states.iter_mut().zip(&mut member.moments).zip(rec.patches) {
                state.patch_id = p.patch_id;
                state.set_params(&p.params);
                *moments = p.moments;
            }
        }
        opt.rngs = ckpt.rngs;
        opt.step = ckpt.step;
        opt.tournaments = ckpt.tournaments;
        opt.trace = ckpt.trace;
        self.phase = if opt.is_finished() { Phase::Finished } else { Phase::Paused };
        self.last_error = None;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.restore(Checkpoint::decode(&bytes)?)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn update_manifest(path: &Path, record: &ExportRecord) -> Result<()> {
    let mut entries: Vec<ExportRecord> = match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map_err(|e| Error::InvalidConfig(format!("unreadable manifest {}: {e}", path.display())))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    entries.retain(|e| e.file != record.file);
    entries.push(record.clone());
    let text = serde_json::to_string_pretty(&entries).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}
