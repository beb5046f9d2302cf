//! Layout of a run directory:
//!
//! ```text
//! checkpoints/encoder_<b>.ckpt, classifier.ckpt, optimizer.ckpt
//! session.json    session bookkeeping
//! history.jsonl   one record per epoch, across commands
//! rounds.jsonl    one record per registration round
//! report.json     report of the latest lifecycle command
//! eval.json       latest evaluation
//! timing.jsonl    wall-clock seconds per epoch (not deterministic)
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use consent_core::datastore::{load_checkpoint, save_checkpoint, CheckpointKind};
use consent_core::trainer::{EpochObserver, EpochRecord, SessionState, TrainingSession};
use consent_core::{ConsentError, Result as CoreResult};
use serde::Serialize;

use crate::error::CliError;

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    /// Drops every artifact of an earlier run.
    pub fn reset(&self) -> Result<(), CliError> {
        for name in [
            "session.json",
            "history.jsonl",
            "rounds.jsonl",
            "report.json",
            "eval.json",
            "timing.jsonl",
        ] {
            let p = self.path(name);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        if self.checkpoint_dir().exists() {
            fs::remove_dir_all(self.checkpoint_dir())?;
        }
        fs::create_dir_all(&self.root)?;
        Ok(())
    }

    pub fn save_session(&self, session: &TrainingSession) -> Result<(), CliError> {
        let dir = self.checkpoint_dir();
        fs::create_dir_all(&dir)?;
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "ckpt") {
                fs::remove_file(p)?;
            }
        }
        for ckpt in session.checkpoints() {
            let name = match (ckpt.kind, ckpt.bucket) {
                (CheckpointKind::Encoder, Some(b)) => format!("encoder_{b}.ckpt"),
                (CheckpointKind::Classifier, _) => "classifier.ckpt".into(),
                (CheckpointKind::Optimizer, _) => "optimizer.ckpt".into(),
                (CheckpointKind::Encoder, None) => {
                    unreachable!("encoder checkpoints carry a bucket")
                }
            };
            save_checkpoint(&dir.join(name), &ckpt)?;
        }
        self.write_json("session.json", &session.state())
    }

    pub fn load_session(&self) -> Result<TrainingSession, CliError> {
        let state_path = self.path("session.json");
        let text = fs::read_to_string(&state_path)
            .map_err(|_| ConsentError::MissingCheckpoint(state_path.display().to_string()))?;
        let state: SessionState = serde_json::from_str(&text)
            .map_err(|e| ConsentError::Malformed(format!("session.json: {e}")))?;
        let dir = self.checkpoint_dir();
        let mut checkpoints = vec![
            load_checkpoint(&dir.join("classifier.ckpt"))?,
            load_checkpoint(&dir.join("optimizer.ckpt"))?,
        ];
        for (&b, _) in state
            .membership
            .iter()
            .filter(|(b, _)| !state.excluded.contains(b))
        {
            checkpoints.push(load_checkpoint(&dir.join(format!("encoder_{b}.ckpt")))?);
        }
        Ok(TrainingSession::restore(state, &checkpoints)?)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        fs::create_dir_all(&self.root)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }

    pub fn append_jsonl<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(name))?;
        writeln!(f, "{}", serde_json::to_string(value)?)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    command: &'a str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

#[derive(Serialize)]
struct TimingLine<'a> {
    command: &'a str,
    epoch: u64,
    seconds: f64,
}

/// Streams epoch records to `history.jsonl` and wall time to `timing.jsonl`.
pub struct HistoryWriter {
    command: &'static str,
    history: BufWriter<File>,
    timing: BufWriter<File>,
    last: Instant,
}

impl HistoryWriter {
    pub fn open(dir: &RunDir, command: &'static str) -> Result<Self, CliError> {
        fs::create_dir_all(dir.root())?;
        let open = |name| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.path(name))
        };
        Ok(Self {
            command,
            history: BufWriter::new(open("history.jsonl")?),
            timing: BufWriter::new(open("timing.jsonl")?),
            last: Instant::now(),
        })
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.history.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

impl EpochObserver for HistoryWriter {
    fn epoch_end(&mut self, _session: &TrainingSession, record: &EpochRecord) -> CoreResult<()> {
        let line = serde_json::to_string(&HistoryLine {
            command: self.command,
            record,
        })
        .map_err(|e| ConsentError::Io(e.to_string()))?;
        writeln!(self.history, "{line}")?;
        let now = Instant::now();
        let timing = TimingLine {
            command: self.command,
            epoch: record.epoch,
            seconds: now.duration_since(self.last).as_secs_f64(),
        };
        self.last = now;
        writeln!(
            self.timing,
            "{}",
            serde_json::to_string(&timing).map_err(|e| ConsentError::Io(e.to_string()))?
        )?;
        Ok(())
    }
}
