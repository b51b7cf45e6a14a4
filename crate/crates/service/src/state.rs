//! Shared session plus loop phase. One `RwLock` guards the session so every
//! mutation is serialized and readers see either the state before or after
//! it, never a mix.

use std::sync::{Arc, Mutex, MutexGuard, PoisonError, RwLock, RwLockReadGuard, RwLockWriteGuard};

use lpal_core::datapool::{HumanLabelOutcome, PoolCounts};
use lpal_core::experiment::{RunWriter, Session};
use lpal_core::metrics::CycleReport;
use lpal_core::train::EpochStats;
use lpal_core::LabelSet;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopState {
    Idle,
    Training,
    Scoring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    /// Index of the latest completed cycle; its selection fills the queue.
    pub cycle: usize,
    pub completed_cycles: usize,
    pub state: LoopState,
    pub counts: PoolCounts,
    pub latest_report: Option<CycleReport>,
    pub progress: Option<Progress>,
    pub last_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestedLabel {
    pub weather: String,
    pub light: String,
}

impl From<LabelSet> for SuggestedLabel {
    fn from(l: LabelSet) -> Self {
        Self {
            weather: l.weather.token().to_string(),
            light: l.light.token().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: u64,
    pub image_url: String,
    /// Acquisition score recorded at selection time.
    pub predicted_loss: f32,
    pub cycle: usize,
    pub suggested: Option<SuggestedLabel>,
}

#[derive(Debug)]
struct Phase {
    state: LoopState,
    progress: Option<Progress>,
    last_error: Option<String>,
}

/// Why an advance request was refused.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AdvanceRefusal {
    Busy(LoopState),
    QueueNotEmpty(usize),
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    session: RwLock<Session>,
    phase: Mutex<Phase>,
    writer: Option<RunWriter>,
}

impl AppState {
    /// Wraps a session, running its bootstrap cycle first if needed. This
    /// trains a model, so call it off the async runtime.
    pub fn bootstrap(mut session: Session, writer: Option<RunWriter>) -> lpal_core::Result<Self> {
        if session.completed() == 0 {
            session.step(true, &mut |_, _| Ok(()))?;
        }
        let state = Self {
            inner: Arc::new(Inner {
                session: RwLock::new(session),
                phase: Mutex::new(Phase {
                    state: LoopState::Idle,
                    progress: None,
                    last_error: None,
                }),
                writer,
            }),
        };
        state.persist(true);
        Ok(state)
    }

    fn session(&self) -> RwLockReadGuard<'_, Session> {
        self.inner.session.read().unwrap_or_else(PoisonError::into_inner)
    }

    fn session_mut(&self) -> RwLockWriteGuard<'_, Session> {
        self.inner.session.write().unwrap_or_else(PoisonError::into_inner)
    }

    fn phase(&self) -> MutexGuard<'_, Phase> {
        self.inner.phase.lock().unwrap_or_else(PoisonError::into_inner)
    }

    pub fn snapshot(&self) -> StatusSnapshot {
        let session = self.session();
        let phase = self.phase();
        snapshot_of(&session, &phase)
    }

    /// Queued samples, highest score first, ties by id.
    pub fn queue(&self, limit: Option<usize>) -> Vec<QueueEntry> {
        let session = self.session();
        let pool = session.pool();
        let mut entries: Vec<QueueEntry> = pool
            .queued_ids()
            .filter_map(|id| {
                let sample = pool.get(id)?;
                Some(QueueEntry {
                    id,
                    image_url: format!("/api/samples/{id}/image"),
                    predicted_loss: sample.predicted_loss().unwrap_or(0.0),
                    cycle: pool.queued_cycle(id)?,
                    suggested: session.suggestion(id).map(Into::into),
                })
            })
            .collect();
        entries.sort_by(|a, b| b.predicted_loss.total_cmp(&a.predicted_loss).then(a.id.cmp(&b.id)));
        entries.truncate(limit.unwrap_or(usize::MAX));
        entries
    }

    /// Pixels of a pool or held-out sample.
    pub fn image(&self, id: u64) -> Option<(usize, Vec<f32>)> {
        let session = self.session();
        let sample = session.pool().get(id).or_else(|| session.eval_pool().get(id))?;
        Some((sample.image().side(), sample.image().pixels().to_vec()))
    }

    pub fn label(&self, id: u64, label: LabelSet) -> lpal_core::Result<(HumanLabelOutcome, StatusSnapshot)> {
        let (outcome, snapshot) = {
            let mut session = self.session_mut();
            // held-out samples exist but can never be queued
            let outcome = if session.eval_pool().get(id).is_some() {
                HumanLabelOutcome::NotQueued
            } else {
                session.apply_human_label(id, label)?
            };
            let phase = self.phase();
            (outcome, snapshot_of(&session, &phase))
        };
        if outcome == HumanLabelOutcome::Applied {
            self.persist(false);
        }
        Ok((outcome, snapshot))
    }

    /// Moves the loop into training and hands back the job to run, or says
    /// why it cannot.
    pub fn begin_advance(&self, force: bool) -> Result<StatusSnapshot, AdvanceRefusal> {
        let session = self.session();
        let mut phase = self.phase();
        if phase.state != LoopState::Idle {
            return Err(AdvanceRefusal::Busy(phase.state));
        }
        let remaining = session.pool().counts().queued;
        if remaining > 0 && !force {
            return Err(AdvanceRefusal::QueueNotEmpty(remaining));
        }
        phase.state = LoopState::Training;
        phase.progress = Some(Progress {
            epoch: 0,
            epochs: session.config().train.epochs,
        });
        phase.last_error = None;
        Ok(snapshot_of(&session, &phase))
    }

    /// Trains and scores one cycle. Blocking; runs on the worker thread
    /// after a successful [`begin_advance`](Self::begin_advance).
    pub fn run_cycle(&self) {
        let result = self.train_and_score();
        if let Err(e) = &result {
            log::error!("cycle failed: {e}");
        } else {
            self.persist(true);
        }
        let mut phase = self.phase();
        phase.state = LoopState::Idle;
        phase.progress = None;
        phase.last_error = result.err().map(|e| e.to_string());
    }

    fn train_and_score(&self) -> lpal_core::Result<()> {
        let job = self.session().job();
        let epochs = job.train.epochs;
        let trained = job.run(&mut |e: &EpochStats, _| {
            self.phase().progress = Some(Progress {
                epoch: e.epoch + 1,
                epochs,
            });
            Ok(())
        })?;
        self.phase().state = LoopState::Scoring;
        let mut session = self.session_mut();
        let cycle = job.cycle;
        session.complete_cycle(job, trained, true).map_err(|e| lpal_core::Error::Cycle {
            cycle,
            source: Box::new(e),
        })?;
        Ok(())
    }

    /// Writes the manifest, and the latest cycle's report when `cycle`.
    fn persist(&self, cycle: bool) {
        let Some(writer) = &self.inner.writer else {
            return;
        };
        let session = self.session();
        let result = if cycle { lpal_core::experiment::write_run(writer, &session) } else { writer.write_session(&session) };
        if let Err(e) = result {
            log::warn!("could not write run artifacts: {e}");
        }
    }
}

fn snapshot_of(session: &Session, phase: &Phase) -> StatusSnapshot {
    StatusSnapshot {
        cycle: session.completed().saturating_sub(1),
        completed_cycles: session.completed(),
        state: phase.state,
        counts: session.pool().counts(),
        latest_report: session.reports().last().cloned(),
        progress: phase.progress,
        last_error: phase.last_error.clone(),
    }
}
