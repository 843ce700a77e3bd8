use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::thread::JoinHandle;

use super::engine::{ControlAction, EditCommand, EditOutcome, ExportRecord, Phase, Session, SessionState, Snapshot};
use crate::error::{Error, Result};

type Job = Box<dyn FnOnce(&mut Session) + Send>;

/// Runs a [`Session`] on its own thread. Every call is queued and executed
/// between gradient steps, so callers always observe step-boundary state
/// and can never interleave with a step.
pub struct SessionHandle {
    tx: Option<Sender<Job>>,
    thread: Option<JoinHandle<()>>,
}

impl SessionHandle {
    pub fn spawn(session: Session) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let thread = std::thread::Builder::new()
            .name("collage-session".into())
            .spawn(move || worker(session, rx))
            .expect("spawning session worker");
        Self {
            tx: Some(tx),
            thread: Some(thread),
        }
    }

    /// Runs `f` on the worker at the next step boundary and waits for it.
    pub fn call<R, F>(&self, f: F) -> Result<R>
    where
        R: Send + 'static,
        F: FnOnce(&mut Session) -> R + Send + 'static,
    {
        let (reply_tx, reply_rx) = mpsc::sync_channel(1);
        let job: Job = Box::new(move |s| {
            let _ = reply_tx.send(f(s));
        });
        let gone = || Error::InvalidPhase("session worker has stopped".into());
        self.tx.as_ref().ok_or_else(gone)?.send(job).map_err(|_| gone())?;
        reply_rx.recv().map_err(|_| gone())
    }

    pub fn state(&self) -> Result<SessionState> {
        self.call(|s| s.state())
    }

    pub fn control(&self, action: ControlAction) -> Result<SessionState> {
        self.call(move |s| s.control(action))?
    }

    pub fn edit(&self, edit: EditCommand) -> Result<EditOutcome> {
        self.call(move |s| s.apply_edit(&edit))?
    }

    pub fn hit(&self, x: i64, y: i64, genome_id: Option<usize>) -> Result<Option<usize>> {
        self.call(move |s| s.hit(x, y, genome_id))?
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        self.call(|s| s.snapshot())?
    }

    pub fn export_hires(&self, width: usize, height: usize) -> Result<ExportRecord> {
        self.call(move |s| s.export_hires(width, height))?
    }

    pub fn save_checkpoint(&self, path: PathBuf) -> Result<PathBuf> {
        self.call(move |s| s.save_checkpoint(&path))?
    }

    pub fn load_checkpoint(&self, path: PathBuf) -> Result<()> {
        self.call(move |s| s.load_checkpoint(&path))?
    }
}

impl Drop for SessionHandle {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn worker(mut session: Session, rx: Receiver<Job>) {
    loop {
        if session.phase() == Phase::Running {
            match rx.try_recv() {
                Ok(job) => job(&mut session),
                Err(TryRecvError::Empty) => {
                    // Failures are recorded in the session state.
                    let _ = session.step_once();
                }
                Err(TryRecvError::Disconnected) => return,
            }
        } else {
            match rx.recv() {
                Ok(job) => job(&mut session),
                Err(_) => return,
            }
        }
    }
}
