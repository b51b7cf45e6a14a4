//! The active-learning procedure end to end: configuration, a stepwise
//! session, the comparison experiments and their on-disk artifacts.

mod artifacts;
mod runs;
mod session;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use artifacts::{write_run, RunWriter};
pub use runs::{
    pretrain_source, run_active_learning, run_joint_vs_single, run_strategy_comparison, run_warmstart_vs_random,
    CategoryF1, JointReport, JointSeed, RunResult, StrategyComparison, StrategySummary, WarmstartReport, WarmstartSeed,
};
pub use session::{CycleJob, LabelMode, Session};

use crate::acquisition::{AcquisitionStrategy, ThresholdPolicy};
use crate::datapool::{ingest_pgm, synth_generate, Pool, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{InitPolicy, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthConfig),
    Pgm { images: PathBuf, labels: PathBuf, side: usize },
}

impl DataSource {
    pub fn load(&self) -> Result<Pool> {
        match self {
            DataSource::Synth(c) => synth_generate(c),
            DataSource::Pgm { images, labels, side } => {
                let report = ingest_pgm(images, labels, *side)?;
                for issue in &report.issues {
                    log::warn!("skipped {}: {}", issue.file, issue.message);
                }
                Ok(report.pool)
            }
        }
    }
}

/// Source-domain pretraining for the warm-start comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Should use a different seed, priors and id range than the target pool.
    pub source: SynthConfig,
    pub epochs: usize,
    #[serde(default = "default_pretrain_seed")]
    pub seed: u64,
}

fn default_pretrain_seed() -> u64 {
    0x5EED
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Stratified held-out share of the pool; never queried.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "default_per_cycle")]
    pub per_cycle: usize,
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Random init seeds are offset by the run seed.
    #[serde(default)]
    pub init: InitPolicy,
    #[serde(default)]
    pub strategy: AcquisitionStrategy,
    #[serde(default)]
    pub thresholds: ThresholdPolicy,
    #[serde(default = "yes")]
    pub auto_label: bool,
    /// Auto labels stay out of the training set unless this is set.
    #[serde(default)]
    pub train_on_auto: bool,
    #[serde(default)]
    pub oracle_noise: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Size of the top/bottom sets in the loss-prediction diagnostic.
    #[serde(default = "default_eval_k")]
    pub eval_k: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub save_checkpoints: bool,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    /// Macro-F1 level for the epochs-to-threshold measurement.
    #[serde(default = "default_f1_threshold")]
    pub f1_threshold: f64,
}

fn default_eval_fraction() -> f64 {
    0.2
}
fn default_bootstrap() -> usize {
    90
}
fn default_per_cycle() -> usize {
    30
}
fn default_cycles() -> usize {
    5
}
fn yes() -> bool {
    true
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_eval_k() -> usize {
    50
}
fn default_f1_threshold() -> f64 {
    0.7
}

impl ExperimentConfig {
    /// Desk-scale defaults on a synthetic pool.
    pub fn desk(synth: SynthConfig) -> Self {
        let data = serde_json::to_value(DataSource::Synth(synth)).expect("synth config serializes");
        serde_json::from_value(serde_json::json!({ "data": data })).expect("defaults deserialize")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_slice(bytes)?;
        config.validate()?;
        Ok(config)
    }

    /// Human-labeled budget after `cycle` cycles.
    pub fn budget_at(&self, cycle: usize) -> usize {
        self.bootstrap + cycle * self.per_cycle
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.thresholds.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config(format!("eval fraction {} outside [0, 1)", self.eval_fraction)));
        }
        if !(0.0..=1.0).contains(&self.oracle_noise) {
            return Err(Error::Config(format!("oracle noise {} outside [0, 1]", self.oracle_noise)));
        }
        if self.bootstrap == 0 {
            return Err(Error::Config("bootstrap set must not be empty".into()));
        }
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
            if s.side != self.model.backbone.input_side {
                return Err(Error::Config(format!(
                    "synthetic side {} differs from model input side {}",
                    s.side, self.model.backbone.input_side
                )));
            }
            let available = s.n - (self.eval_fraction * s.n as f64).round() as usize;
            if self.budget_at(self.cycles) > available {
                return Err(Error::Config(format!(
                    "budget {} + {}x{} exceeds the {available} samples outside the held-out split",
                    self.bootstrap, self.cycles, self.per_cycle
                )));
            }
        }
        Ok(())
    }
}

/// Splitmix-style combination of seed parts.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}
