//! One seed of the active-learning loop, advanced a cycle at a time. The
//! batch runner and the annotation service both drive this type.

use std::collections::{BTreeMap, BTreeSet};

use super::{derive_seed, ExperimentConfig};
use crate::acquisition::{
    commit_auto_labels, score, score_pool, select_top_k, triage, AcquisitionStrategy, TriageThresholds,
};
use crate::datapool::{stratified_bootstrap, HumanLabelOutcome, LabelProvenance, LabeledExample, Pool};
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::metrics::{evaluate, CycleReport, Evaluation, SelectionSummary, DEGENERATE_F1_NOTE};
use crate::model::Model;
use crate::train::{train_cycle, EpochStats, InitPolicy, TrainConfig, Trained};

/// Who labels the query batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// The simulated annotator labels it at once.
    Oracle,
    /// It waits in the human queue.
    Queue,
}

pub struct Session {
    config: ExperimentConfig,
    seed: u64,
    mode: LabelMode,
    pool: Pool,
    eval: Pool,
    base: Model,
    model: Option<Model>,
    reports: Vec<CycleReport>,
    epochs: Vec<EpochStats>,
    suggestions: BTreeMap<u64, LabelSet>,
}

/// Everything one training run needs, detached from the session so it can
/// run without holding a lock on it.
pub struct CycleJob {
    pub cycle: usize,
    pub base: Model,
    pub train: TrainConfig,
    examples: Vec<(u64, Vec<f32>, LabelSet)>,
    budget: usize,
    auto_in_training: usize,
}

impl CycleJob {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn run(&self, observer: &mut dyn FnMut(&EpochStats, &Model) -> Result<()>) -> Result<Trained> {
        let examples: Vec<LabeledExample<'_>> = self
            .examples
            .iter()
            .map(|(id, image, label)| LabeledExample {
                id: *id,
                image,
                label: *label,
            })
            .collect();
        train_cycle(&self.base, &examples, &self.train, self.cycle, observer)
    }
}

fn base_model(config: &ExperimentConfig, seed: u64) -> Result<Model> {
    match &config.init {
        InitPolicy::Random { seed: s } => Model::build(config.model.clone(), derive_seed(&[*s, seed])),
        warm => warm.base_model(&config.model),
    }
}

impl Session {
    pub fn new(config: ExperimentConfig, seed: u64, mode: LabelMode) -> Result<Self> {
        config.validate()?;
        let pool = config.data.load()?;
        Self::with_pool(config, pool, seed, mode)
    }

    /// Splits off the held-out set, draws and labels the bootstrap set.
    pub fn with_pool(config: ExperimentConfig, pool: Pool, seed: u64, mode: LabelMode) -> Result<Self> {
        config.validate()?;
        if pool.side() != config.model.backbone.input_side {
            return Err(Error::Config(format!(
                "pool images are {0}x{0}, model expects {1}",
                pool.side(),
                config.model.backbone.input_side
            )));
        }
        let (mut pool, eval) = pool.split_stratified(config.eval_fraction, derive_seed(&[seed, 1]))?;
        if eval.is_empty() {
            return Err(Error::Config("held-out split is empty".into()));
        }
        let needed = config.budget_at(config.cycles);
        if mode == LabelMode::Oracle && needed > pool.len() {
            return Err(Error::Config(format!("budget {needed} exceeds the {} queryable samples", pool.len())));
        }
        let boot = stratified_bootstrap(&pool, config.bootstrap, derive_seed(&[seed, 2]))?;
        pool.oracle_label(&boot, config.oracle_noise, derive_seed(&[seed, 3]), LabelProvenance::Bootstrap)?;
        let base = base_model(&config, seed)?;
        Ok(Self {
            config,
            seed,
            mode,
            pool,
            eval,
            base,
            model: None,
            reports: Vec::new(),
            epochs: Vec::new(),
            suggestions: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pool(&self) -> &Pool {
        &self.pool
    }

    pub fn eval_pool(&self) -> &Pool {
        &self.eval
    }

    pub fn base_model(&self) -> &Model {
        &self.base
    }

    /// Most recently trained model.
    pub fn model(&self) -> Option<&Model> {
        self.model.as_ref()
    }

    /// Number of completed cycles.
    pub fn completed(&self) -> usize {
        self.reports.len()
    }

    pub fn reports(&self) -> &[CycleReport] {
        &self.reports
    }

    pub fn epochs(&self) -> &[EpochStats] {
        &self.epochs
    }

    /// Model argmax recorded when `id` was queued.
    pub fn suggestion(&self, id: u64) -> Option<LabelSet> {
        self.suggestions.get(&id).copied()
    }

    fn strategy_for(&self, cycle: usize) -> AcquisitionStrategy {
        let s = self.config.strategy;
        AcquisitionStrategy::new(s.kind, derive_seed(&[s.seed, self.seed, cycle as u64]))
    }

    /// Snapshot of the next cycle's training run.
    pub fn job(&self) -> CycleJob {
        let view = self.pool.learner();
        let examples: Vec<(u64, Vec<f32>, LabelSet)> = view
            .labeled(self.config.train_on_auto)
            .into_iter()
            .map(|e| (e.id, e.image.to_vec(), e.label))
            .collect();
        let auto_in_training = examples
            .iter()
            .filter(|(id, _, _)| view.sample(*id).is_some_and(|s| s.provenance == LabelProvenance::Auto))
            .count();
        CycleJob {
            cycle: self.completed(),
            base: self.base.clone(),
            train: TrainConfig {
                seed: derive_seed(&[self.config.train.seed, self.seed]),
                ..self.config.train.clone()
            },
            budget: examples.len() - auto_in_training,
            auto_in_training,
            examples,
        }
    }

    /// Held-out `(id, image, truth)` triples.
    pub fn eval_set(&self) -> Vec<(u64, &[f32], LabelSet)> {
        self.eval.oracle().labeled_truth()
    }

    pub fn evaluate(&self, model: &Model) -> Result<Evaluation> {
        evaluate(model, &self.eval_set(), self.config.eval_k)
    }

    /// Evaluates the trained model and, when `select` is set, picks the next
    /// query batch and triages the remaining candidates.
    pub fn complete_cycle(&mut self, job: CycleJob, trained: Trained, select: bool) -> Result<&CycleReport> {
        if job.cycle != self.completed() {
            return Err(Error::InvalidArgument(format!(
                "job is for cycle {} but the session is at cycle {}",
                job.cycle,
                self.completed()
            )));
        }
        let cycle = job.cycle;
        let model = trained.model;
        let evaluation = self.evaluate(&model)?;
        let selection = if select { self.select(&model, cycle)? } else { None };
        self.reports.push(CycleReport {
            cycle,
            strategy: self.config.strategy.kind.name().to_string(),
            seed: self.seed,
            budget: job.budget,
            auto_in_training: job.auto_in_training,
            evaluation,
            degenerate_f1_convention: DEGENERATE_F1_NOTE.to_string(),
            counts: self.pool.counts(),
            selection,
        });
        self.epochs.extend(trained.epochs);
        self.model = Some(model);
        Ok(self.reports.last().expect("just pushed"))
    }

    fn select(&mut self, model: &Model, cycle: usize) -> Result<Option<SelectionSummary>> {
        if self.pool.learner().candidates().is_empty() {
            return Ok(None);
        }
        let strategy = self.strategy_for(cycle);
        let scores = score_pool(model, &mut self.pool, strategy)?;
        let selected = select_top_k(&scores, self.config.per_cycle.min(scores.len()))?;
        match self.mode {
            LabelMode::Oracle => self.pool.oracle_label(
                &selected,
                self.config.oracle_noise,
                derive_seed(&[self.seed, cycle as u64, 4]),
                LabelProvenance::Human,
            )?,
            LabelMode::Queue => {
                let view = self.pool.learner();
                let images: Vec<&[f32]> = selected.iter().filter_map(|&id| view.sample(id)).map(|s| s.image).collect();
                let labels = model.predict(&images, 64)?.argmax_labels();
                self.suggestions.extend(selected.iter().copied().zip(labels));
                self.pool.enqueue(&selected, cycle)?;
            }
        }

        let chosen: BTreeSet<u64> = selected.iter().copied().collect();
        // only still-unlabeled samples are triaged; auto labels stand until a human overrides them
        let view = self.pool.learner();
        let rest: BTreeMap<u64, f32> = scores
            .into_iter()
            .filter(|(id, _)| !chosen.contains(id))
            .filter(|(id, _)| view.sample(*id).is_some_and(|s| s.provenance == LabelProvenance::None))
            .collect();
        let mut summary = SelectionSummary {
            selected,
            threshold_low: None,
            threshold_high: None,
            auto_labeled: 0,
            auto_label_accuracy: None,
            human_flagged: 0,
            deferred: 0,
        };
        if rest.is_empty() {
            return Ok(Some(summary));
        }
        let thresholds = self.calibrate(model, strategy)?;
        let result = triage(&rest, thresholds);
        summary.threshold_low = Some(thresholds.low);
        summary.threshold_high = Some(thresholds.high);
        summary.human_flagged = result.human_queue.len();
        if self.config.auto_label {
            let auto: Vec<u64> = result.auto.iter().copied().collect();
            let written = commit_auto_labels(model, &mut self.pool, &auto)?;
            summary.auto_labeled = written.len();
            let oracle = self.pool.oracle();
            let known: Vec<bool> = written
                .iter()
                .filter_map(|(&id, &label)| oracle.truth(id).map(|t| t == label))
                .collect();
            if !known.is_empty() {
                summary.auto_label_accuracy = Some(known.iter().filter(|&&k| k).count() as f64 / known.len() as f64);
            }
        }
        // above-threshold ids beyond the query batch wait for a later cycle
        let waiting: Vec<u64> = result.human_queue.iter().chain(&result.deferred).copied().collect();
        summary.deferred = waiting.len();
        self.pool.set_deferred(waiting);
        Ok(Some(summary))
    }

    /// Thresholds from the scores of the current annotator-labeled set.
    fn calibrate(&self, model: &Model, strategy: AcquisitionStrategy) -> Result<TriageThresholds> {
        let view = self.pool.learner();
        let labeled: Vec<_> = view.labeled(false).iter().filter_map(|e| view.sample(e.id)).collect();
        let reference: Vec<f32> = if labeled.is_empty() {
            Vec::new()
        } else {
            score(model, &labeled, strategy)?.into_values().collect()
        };
        self.config.thresholds.calibrate(&reference)
    }

    /// Trains, evaluates and optionally selects; errors carry the cycle index.
    pub fn step(&mut self, select: bool, observer: &mut dyn FnMut(&EpochStats, &Model) -> Result<()>) -> Result<&CycleReport> {
        let cycle = self.completed();
        let job = self.job();
        let wrap = |e| Error::Cycle {
            cycle,
            source: Box::new(e),
        };
        let trained = job.run(observer).map_err(wrap)?;
        self.complete_cycle(job, trained, select).map_err(wrap)
    }

    /// Bootstrap training plus every configured cycle; no selection after
    /// the last one.
    pub fn run_all(&mut self, observer: &mut dyn FnMut(&EpochStats, &Model) -> Result<()>) -> Result<()> {
        let cycles = self.config.cycles;
        while self.completed() <= cycles {
            let select = self.completed() < cycles;
            self.step(select, observer)?;
        }
        Ok(())
    }

    pub fn apply_human_label(&mut self, id: u64, label: LabelSet) -> Result<HumanLabelOutcome> {
        let outcome = self.pool.apply_human_label(id, label)?;
        if outcome == HumanLabelOutcome::Applied {
            self.suggestions.remove(&id);
        }
        Ok(outcome)
    }
}
