use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::sample::{LabelProvenance, Sample};
use crate::error::{Error, Result};
use crate::labels::LabelSet;

/// All samples plus the labeled / unlabeled index.
///
/// `queued` and `deferred` are subsets of the unlabeled index. Mutation goes
/// through `&mut self`; callers that share a pool wrap it in a lock.
#[derive(Clone, Debug)]
pub struct Pool {
    side: usize,
    samples: Vec<Sample>,
    index: BTreeMap<u64, usize>,
    labeled: BTreeSet<u64>,
    unlabeled: BTreeSet<u64>,
    queued: BTreeMap<u64, usize>,
    deferred: BTreeSet<u64>,
    audit: Vec<AuditEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub id: u64,
    pub action: String,
    pub reason: String,
}

/// Sample counts by label state; they always sum to the pool size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub human_labeled: usize,
    pub auto_labeled: usize,
    pub queued: usize,
    pub deferred: usize,
    pub unlabeled: usize,
}

impl PoolCounts {
    pub fn total(&self) -> usize {
        self.human_labeled + self.auto_labeled + self.queued + self.deferred + self.unlabeled
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleState {
    Labeled,
    Queued,
    Deferred,
    Unlabeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HumanLabelOutcome {
    Applied,
    /// Same label was already recorded by a human; nothing changed.
    Unchanged,
    NotQueued,
}

impl Pool {
    pub fn new(side: usize) -> Self {
        Self {
            side,
            samples: Vec::new(),
            index: BTreeMap::new(),
            labeled: BTreeSet::new(),
            unlabeled: BTreeSet::new(),
            queued: BTreeMap::new(),
            deferred: BTreeSet::new(),
            audit: Vec::new(),
        }
    }

    pub fn from_samples(side: usize, samples: impl IntoIterator<Item = Sample>) -> Result<Self> {
        let mut pool = Self::new(side);
        for s in samples {
            pool.insert(s)?;
        }
        Ok(pool)
    }

    /// Adds an unlabeled sample.
    pub fn insert(&mut self, sample: Sample) -> Result<()> {
        if sample.image().side() != self.side {
            return Err(Error::InvalidArgument(format!(
                "sample {} has side {}, pool expects {}",
                sample.id(),
                sample.image().side(),
                self.side
            )));
        }
        if self.index.contains_key(&sample.id()) {
            return Err(Error::InvalidArgument(format!("duplicate sample id {}", sample.id())));
        }
        let id = sample.id();
        self.index.insert(id, self.samples.len());
        if sample.working_label().is_some() {
            self.labeled.insert(id);
        } else {
            self.unlabeled.insert(id);
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.index.keys().copied()
    }

    pub fn get(&self, id: u64) -> Option<&Sample> {
        self.index.get(&id).map(|&i| &self.samples[i])
    }

    pub(super) fn get_mut(&mut self, id: u64) -> Result<&mut Sample> {
        let i = *self.index.get(&id).ok_or(Error::UnknownSample(id))?;
        Ok(&mut self.samples[i])
    }

    /// Samples in id order.
    pub(super) fn samples_sorted(&self) -> impl Iterator<Item = &Sample> + '_ {
        self.index.values().map(move |&i| &self.samples[i])
    }

    pub fn labeled_ids(&self) -> &BTreeSet<u64> {
        &self.labeled
    }

    pub fn unlabeled_ids(&self) -> &BTreeSet<u64> {
        &self.unlabeled
    }

    pub fn queued_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.queued.keys().copied()
    }

    /// Cycle in which `id` was queued, if it is waiting for a human.
    pub fn queued_cycle(&self, id: u64) -> Option<usize> {
        self.queued.get(&id).copied()
    }

    pub fn deferred_ids(&self) -> &BTreeSet<u64> {
        &self.deferred
    }

    pub fn audit_log(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn state(&self, id: u64) -> Option<SampleState> {
        self.get(id)?;
        Some(if self.labeled.contains(&id) {
            SampleState::Labeled
        } else if self.queued.contains_key(&id) {
            SampleState::Queued
        } else if self.deferred.contains(&id) {
            SampleState::Deferred
        } else {
            SampleState::Unlabeled
        })
    }

    pub fn counts(&self) -> PoolCounts {
        let (mut human_labeled, mut auto_labeled) = (0, 0);
        for &id in &self.labeled {
            match self.get(id).map(Sample::provenance) {
                Some(LabelProvenance::Auto) => auto_labeled += 1,
                _ => human_labeled += 1,
            }
        }
        PoolCounts {
            human_labeled,
            auto_labeled,
            queued: self.queued.len(),
            deferred: self.deferred.len(),
            unlabeled: self.unlabeled.len() - self.queued.len() - self.deferred.len(),
        }
    }

    /// Writes a label and moves the id into the labeled index.
    pub(super) fn write_label(&mut self, id: u64, label: LabelSet, provenance: LabelProvenance) -> Result<()> {
        self.get_mut(id)?.set_label(label, provenance);
        self.unlabeled.remove(&id);
        self.queued.remove(&id);
        self.deferred.remove(&id);
        self.labeled.insert(id);
        Ok(())
    }

    /// Queues ids for human annotation. Auto-labeled ids are accepted: their
    /// auto label is withdrawn (and audited) so the human label replaces it.
    pub fn enqueue(&mut self, ids: &[u64], cycle: usize) -> Result<()> {
        for &id in ids {
            let sample = self.get(id).ok_or(Error::UnknownSample(id))?;
            if sample.provenance().is_annotator() {
                return Err(Error::InvalidArgument(format!("sample {id} already has an annotator label")));
            }
        }
        for &id in ids {
            if self.labeled.remove(&id) {
                self.get_mut(id)?.clear_label();
                self.unlabeled.insert(id);
                self.audit.push(AuditEntry {
                    id,
                    action: "auto_label_withdrawn".into(),
                    reason: "queued for human annotation".into(),
                });
            }
            self.deferred.remove(&id);
            self.queued.insert(id, cycle);
        }
        Ok(())
    }

    /// Replaces the deferred set; ids already queued or labeled are ignored.
    pub fn set_deferred(&mut self, ids: impl IntoIterator<Item = u64>) {
        self.deferred = ids
            .into_iter()
            .filter(|id| self.unlabeled.contains(id) && !self.queued.contains_key(id))
            .collect();
    }

    /// Label from a human annotator. Only queued ids accept new labels;
    /// repeating an identical human label is a no-op.
    pub fn apply_human_label(&mut self, id: u64, label: LabelSet) -> Result<HumanLabelOutcome> {
        let sample = self.get(id).ok_or(Error::UnknownSample(id))?;
        if !self.queued.contains_key(&id) {
            let same = sample.provenance() == LabelProvenance::Human && sample.working_label() == Some(label);
            return Ok(if same {
                HumanLabelOutcome::Unchanged
            } else {
                HumanLabelOutcome::NotQueued
            });
        }
        self.write_label(id, label, LabelProvenance::Human)?;
        Ok(HumanLabelOutcome::Applied)
    }

    /// Writes a model-derived label. Annotator labels always win: such ids
    /// are skipped and recorded in the audit log. Returns whether the label
    /// was written.
    pub fn commit_auto_label(&mut self, id: u64, label: LabelSet) -> Result<bool> {
        let provenance = self.get(id).ok_or(Error::UnknownSample(id))?.provenance();
        let reason = match provenance {
            LabelProvenance::Human | LabelProvenance::Bootstrap => Some("annotator label takes precedence"),
            LabelProvenance::Auto => Some("already auto-labeled"),
            LabelProvenance::None if self.queued.contains_key(&id) => Some("queued for human annotation"),
            LabelProvenance::None => None,
        };
        if let Some(reason) = reason {
            self.audit.push(AuditEntry {
                id,
                action: "auto_label_skipped".into(),
                reason: reason.into(),
            });
            return Ok(false);
        }
        self.write_label(id, label, LabelProvenance::Auto)?;
        Ok(true)
    }

    /// Caches acquisition scores on samples.
    pub fn record_scores(&mut self, scores: &BTreeMap<u64, f32>) -> Result<()> {
        for (&id, &s) in scores {
            self.get_mut(id)?.set_predicted_loss(Some(s));
        }
        Ok(())
    }

    /// JSON-serializable snapshot of ids, label state and provenance.
    pub fn manifest(&self) -> PoolManifest {
        PoolManifest {
            side: self.side,
            counts: self.counts(),
            samples: self
                .samples_sorted()
                .map(|s| ManifestEntry {
                    id: s.id(),
                    source: s.source().map(str::to_string),
                    state: self.state(s.id()).expect("id from pool"),
                    working_label: s.working_label(),
                    provenance: s.provenance(),
                    predicted_loss: s.predicted_loss(),
                    queued_cycle: self.queued_cycle(s.id()),
                })
                .collect(),
            audit: self.audit.clone(),
        }
    }

    /// Learner-facing access; exposes no ground truth.
    pub fn learner(&self) -> LearnerView<'_> {
        LearnerView { pool: self }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub side: usize,
    pub counts: PoolCounts,
    pub samples: Vec<ManifestEntry>,
    pub audit: Vec<AuditEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub source: Option<String>,
    pub state: SampleState,
    pub working_label: Option<LabelSet>,
    pub provenance: LabelProvenance,
    pub predicted_loss: Option<f32>,
    pub queued_cycle: Option<usize>,
}

/// Read-only view used by training and acquisition. It cannot reach truth.
#[derive(Clone, Copy)]
pub struct LearnerView<'a> {
    pool: &'a Pool,
}

/// A sample as the learner sees it.
#[derive(Clone, Copy, Debug)]
pub struct LearnerSample<'a> {
    pub id: u64,
    pub image: &'a [f32],
    pub working_label: Option<LabelSet>,
    pub provenance: LabelProvenance,
    pub predicted_loss: Option<f32>,
}

/// A training example: image plus its working label.
#[derive(Clone, Copy, Debug)]
pub struct LabeledExample<'a> {
    pub id: u64,
    pub image: &'a [f32],
    pub label: LabelSet,
}

impl<'a> LearnerView<'a> {
    pub fn side(&self) -> usize {
        self.pool.side
    }

    fn project(s: &'a Sample) -> LearnerSample<'a> {
        LearnerSample {
            id: s.id(),
            image: s.image().pixels(),
            working_label: s.working_label(),
            provenance: s.provenance(),
            predicted_loss: s.predicted_loss(),
        }
    }

    pub fn sample(&self, id: u64) -> Option<LearnerSample<'a>> {
        self.pool.get(id).map(Self::project)
    }

    /// Labeled samples in id order. Auto labels are included only on request.
    pub fn labeled(&self, include_auto: bool) -> Vec<LabeledExample<'a>> {
        self.pool
            .labeled
            .iter()
            .filter_map(|&id| self.pool.get(id))
            .filter(|s| include_auto || s.provenance() != LabelProvenance::Auto)
            .filter_map(|s| {
                s.working_label().map(|label| LabeledExample {
                    id: s.id(),
                    image: s.image().pixels(),
                    label,
                })
            })
            .collect()
    }

    /// Query candidates in id order: samples without an annotator label
    /// that are not waiting in the human queue. Auto-labeled samples stay
    /// eligible since a human label overrides an auto label.
    pub fn candidates(&self) -> Vec<LearnerSample<'a>> {
        self.pool
            .samples_sorted()
            .filter(|s| !s.provenance().is_annotator() && !self.pool.queued.contains_key(&s.id()))
            .map(Self::project)
            .collect()
    }

    /// Every sample in id order.
    pub fn all(&self) -> Vec<LearnerSample<'a>> {
        self.pool.samples_sorted().map(Self::project).collect()
    }
}
