//! Live optimisation sessions: configuration, the step/edit/export engine,
//! checkpoints and the worker thread that serialises access to it.

pub mod checkpoint;
pub mod config;
mod engine;
mod worker;

pub use checkpoint::Checkpoint;
pub use config::{CriticTemplate, Prompts, SessionConfig};
pub use engine::{
    ControlAction, EditCommand, EditOutcome, ExportRecord, Phase, Session, SessionState, Snapshot,
    MANIFEST_NAME,
};
pub use worker::SessionHandle;
