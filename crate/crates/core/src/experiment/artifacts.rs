//! Run directory layout:
//!
//! ```text
//! config.json                      byte copy of the input config
//! curves.csv                       budget,macro_f1,strategy,seed
//! [<strategy>/]seed_<s>/cycle_<i>.json
//! [<strategy>/]seed_<s>/epochs.jsonl
//! [<strategy>/]seed_<s>/manifest.json
//! [<strategy>/]checkpoints/seed_<s>/cycle_<i>.ckpt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::Session;
use crate::error::{Error, Result};
use crate::metrics::{curves_csv, CurvePoint};
use crate::model::save_checkpoint;

#[derive(Clone, Debug)]
pub struct RunWriter {
    root: PathBuf,
    save_checkpoints: bool,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl RunWriter {
    /// Creates `root` and stores the config bytes verbatim.
    pub fn create(root: &Path, raw_config: &[u8], save_checkpoints: bool) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        write(&root.join("config.json"), raw_config)?;
        Ok(Self {
            root: root.to_path_buf(),
            save_checkpoints,
        })
    }

    /// Writer for a subdirectory (one strategy of a comparison).
    pub fn scoped(&self, name: &str) -> Self {
        Self {
            root: self.root.join(name),
            save_checkpoints: self.save_checkpoints,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed_{seed}"))
    }

    pub fn write_json<T: Serialize>(&self, relative: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        write(&self.root.join(relative), &text)
    }

    pub fn write_curves(&self, points: &[CurvePoint]) -> Result<()> {
        write(&self.root.join("curves.csv"), curves_csv(points)?.as_bytes())
    }

    /// Report and checkpoint of the session's latest cycle.
    pub fn write_cycle(&self, session: &Session) -> Result<()> {
        let Some(report) = session.reports().last() else {
            return Ok(());
        };
        let dir = self.seed_dir(session.seed());
        let mut text = serde_json::to_vec_pretty(report)?;
        text.push(b'\n');
        write(&dir.join(format!("cycle_{}.json", report.cycle)), &text)?;
        if self.save_checkpoints {
            if let Some(model) = session.model() {
                let path = self
                    .root
                    .join("checkpoints")
                    .join(format!("seed_{}", session.seed()))
                    .join(format!("cycle_{}.ckpt", report.cycle));
                save_checkpoint(model, &path)?;
            }
        }
        Ok(())
    }

    /// Epoch log and pool manifest of a finished session.
    pub fn write_session(&self, session: &Session) -> Result<()> {
        let dir = self.seed_dir(session.seed());
        let mut lines = Vec::new();
        for e in session.epochs() {
            serde_json::to_writer(&mut lines, e)?;
            lines.push(b'\n');
        }
        write(&dir.join("epochs.jsonl"), &lines)?;
        let mut manifest = serde_json::to_vec_pretty(&session.pool().manifest())?;
        manifest.push(b'\n');
        write(&dir.join("manifest.json"), &manifest)
    }
}

/// Writes every artifact of a finished session.
pub fn write_run(writer: &RunWriter, session: &Session) -> Result<()> {
    writer.write_cycle(session)?;
    writer.write_session(session)
}
