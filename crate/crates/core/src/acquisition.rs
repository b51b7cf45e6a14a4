//! Scoring unlabeled samples, picking the query batch, and triaging the
//! rest into auto-label / human / deferred.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapool::{LearnerSample, Pool};
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::model::{Model, ModelOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    PredictedLoss,
    Entropy,
    LeastConfidence,
    Random,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::PredictedLoss => "predicted_loss",
            StrategyKind::Entropy => "entropy",
            StrategyKind::LeastConfidence => "least_confidence",
            StrategyKind::Random => "random",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted_loss" => Ok(StrategyKind::PredictedLoss),
            "entropy" => Ok(StrategyKind::Entropy),
            "least_confidence" => Ok(StrategyKind::LeastConfidence),
            "random" => Ok(StrategyKind::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy {other:?} (expected predicted_loss, entropy, least_confidence or random)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcquisitionStrategy {
    pub kind: StrategyKind,
    /// Only the random kind reads this.
    #[serde(default)]
    pub seed: u64,
}

impl AcquisitionStrategy {
    pub fn new(kind: StrategyKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

impl Default for AcquisitionStrategy {
    fn default() -> Self {
        Self::new(StrategyKind::PredictedLoss, 0)
    }
}

fn softmax(logits: &[f32; 3]) -> [f64; 3] {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e = logits.map(|z| (z as f64 - max).exp());
    let sum: f64 = e.iter().sum();
    e.map(|x| x / sum)
}

fn entropy(p: &[f64; 3]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
}

/// Scores aligned with `ids` from already computed model outputs.
pub fn scores_from_output(ids: &[u64], output: &ModelOutput, strategy: AcquisitionStrategy) -> Result<BTreeMap<u64, f32>> {
    if output.len() != ids.len() {
        return Err(Error::Shape(format!("{} outputs for {} ids", output.len(), ids.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(strategy.seed);
    let mut scores = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        let (w, l) = (softmax(&output.weather_logits[i]), softmax(&output.light_logits[i]));
        let s = match strategy.kind {
            StrategyKind::PredictedLoss => output.predicted_loss[i] as f64,
            StrategyKind::Entropy => entropy(&w) + entropy(&l),
            StrategyKind::LeastConfidence => {
                let top = |p: &[f64; 3]| p.iter().copied().fold(0.0, f64::max);
                1.0 - top(&w).min(top(&l))
            }
            StrategyKind::Random => rng.gen::<f64>(),
        };
        scores.insert(id, s as f32);
    }
    Ok(scores)
}

/// Runs the model over `samples` and scores them.
pub fn score(model: &Model, samples: &[LearnerSample<'_>], strategy: AcquisitionStrategy) -> Result<BTreeMap<u64, f32>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to score".into()));
    }
    if strategy.kind == StrategyKind::PredictedLoss && model.config().loss_pred.is_none() {
        return Err(Error::InvalidArgument("predicted_loss strategy needs a loss-prediction module".into()));
    }
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let images: Vec<&[f32]> = samples.iter().map(|s| s.image).collect();
    let output = model.predict(&images, 64)?;
    scores_from_output(&ids, &output, strategy)
}

/// Scores every query candidate of `pool` and caches the scores on it.
pub fn score_pool(model: &Model, pool: &mut Pool, strategy: AcquisitionStrategy) -> Result<BTreeMap<u64, f32>> {
    let scores = score(model, &pool.learner().candidates(), strategy)?;
    pool.record_scores(&scores)?;
    Ok(scores)
}

/// Ids ordered by descending score, ties by ascending id.
pub fn rank_descending(scores: &BTreeMap<u64, f32>) -> Vec<u64> {
    let mut ranked: Vec<(u64, f32)> = scores.iter().map(|(&id, &s)| (id, s)).collect();
    // BTreeMap iteration is already id-ascending and the sort is stable
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked.into_iter().map(|(id, _)| id).collect()
}

/// The `k` highest-scoring ids, sorted ascending.
pub fn select_top_k(scores: &BTreeMap<u64, f32>, k: usize) -> Result<Vec<u64>> {
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!("asked for {k} of {} scored samples", scores.len())));
    }
    let mut top: Vec<u64> = rank_descending(scores).into_iter().take(k).collect();
    top.sort_unstable();
    Ok(top)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriageThresholds {
    pub low: f32,
    pub high: f32,
}

impl TriageThresholds {
    pub fn new(low: f32, high: f32) -> Result<Self> {
        if low.is_nan() || high.is_nan() || low > high {
            return Err(Error::InvalidArgument(format!("thresholds need low <= high, got ({low}, {high})")));
        }
        Ok(Self { low, high })
    }
}

/// How the loop arrives at thresholds each cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Percentiles (0 to 100) of the scores of the current labeled set.
    Percentile { low: f64, high: f64 },
    Absolute { low: f32, high: f32 },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Percentile { low: 20.0, high: 90.0 }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::Percentile { low, high } => {
                if !(0.0..=100.0).contains(&low) || !(0.0..=100.0).contains(&high) || low > high {
                    return Err(Error::Config(format!("percentiles ({low}, {high}) need 0 <= low <= high <= 100")));
                }
                Ok(())
            }
            ThresholdPolicy::Absolute { low, high } => TriageThresholds::new(low, high)
                .map(|_| ())
                .map_err(|e| Error::Config(e.to_string())),
        }
    }

    /// Thresholds for this cycle given the labeled-set scores.
    pub fn calibrate(&self, reference: &[f32]) -> Result<TriageThresholds> {
        match *self {
            ThresholdPolicy::Absolute { low, high } => TriageThresholds::new(low, high),
            ThresholdPolicy::Percentile { low, high } => {
                if reference.is_empty() {
                    return Err(Error::InvalidArgument("percentile thresholds need reference scores".into()));
                }
                let mut sorted = reference.to_vec();
                sorted.sort_by(f32::total_cmp);
                TriageThresholds::new(percentile(&sorted, low), percentile(&sorted, high))
            }
        }
    }
}

/// Linear-interpolation percentile of sorted data.
pub fn percentile(sorted: &[f32], p: f64) -> f32 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let frac = pos - lo as f64;
    (sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac) as f32
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageResult {
    pub auto: BTreeSet<u64>,
    pub human_queue: BTreeSet<u64>,
    pub deferred: BTreeSet<u64>,
}

pub fn triage(scores: &BTreeMap<u64, f32>, thresholds: TriageThresholds) -> TriageResult {
    let mut out = TriageResult::default();
    for (&id, &s) in scores {
        if s < thresholds.low {
            out.auto.insert(id);
        } else if s > thresholds.high {
            out.human_queue.insert(id);
        } else {
            out.deferred.insert(id);
        }
    }
    out
}

/// Labels `auto_ids` with the model's argmax. Ids that already carry an
/// annotator label are left alone (the pool audits the skip). Returns the
/// labels written.
pub fn commit_auto_labels(model: &Model, pool: &mut Pool, auto_ids: &[u64]) -> Result<BTreeMap<u64, LabelSet>> {
    let mut written = BTreeMap::new();
    if auto_ids.is_empty() {
        return Ok(written);
    }
    let view = pool.learner();
    let images = auto_ids
        .iter()
        .map(|&id| view.sample(id).map(|s| s.image).ok_or(Error::UnknownSample(id)))
        .collect::<Result<Vec<_>>>()?;
    let labels = model.predict(&images, 64)?.argmax_labels();
    for (&id, label) in auto_ids.iter().zip(labels) {
        if pool.commit_auto_label(id, label)? {
            written.insert(id, label);
        }
    }
    Ok(written)
}
