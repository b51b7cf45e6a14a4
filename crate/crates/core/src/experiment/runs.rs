//! Batch experiments over several seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{derive_seed, ExperimentConfig, LabelMode, RunWriter, Session};
use crate::acquisition::StrategyKind;
use crate::datapool::{synth_generate, LabelProvenance};
use crate::error::{Error, Result};
use crate::metrics::{CurvePoint, CycleReport, Evaluation};
use crate::model::{save_checkpoint, Model, Provenance, Unit};
use crate::train::{train_cycle, EpochStats, HeadSelection, InitPolicy, TrainConfig};

fn quiet() -> impl FnMut(&EpochStats, &Model) -> Result<()> {
    |stats, _| {
        log::debug!(
            "cycle {} epoch {} task {:.4} lp {:.4}",
            stats.cycle,
            stats.epoch,
            stats.task_loss,
            stats.lp_loss
        );
        Ok(())
    }
}

/// Runs `work` for every seed, on up to `available_parallelism` threads.
/// Results come back in seed order.
fn per_seed<T: Send>(seeds: &[u64], work: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len()).max(1);
    if workers == 1 {
        return seeds.iter().map(|&s| work(s)).collect();
    }
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(workers) {
        let work = &work;
        let results: Vec<Result<T>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|&s| scope.spawn(move || work(s))).collect();
            handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: StrategyKind,
    /// Per-seed cycle reports, in seed order of the config.
    pub reports: BTreeMap<u64, Vec<CycleReport>>,
}

impl RunResult {
    pub fn curve_points(&self) -> Vec<CurvePoint> {
        self.reports
            .iter()
            .flat_map(|(&seed, reports)| {
                reports.iter().map(move |r| CurvePoint {
                    budget: r.budget,
                    macro_f1: r.evaluation.macro_f1,
                    strategy: r.strategy.clone(),
                    seed,
                })
            })
            .collect()
    }

    /// Mean macro F1 at each cycle over seeds.
    pub fn mean_curve(&self) -> Vec<(usize, f64)> {
        let cycles = self.reports.values().map(Vec::len).min().unwrap_or(0);
        (0..cycles)
            .map(|c| {
                let budget = self.reports.values().next().map_or(0, |r| r[c].budget);
                let mean = self.reports.values().map(|r| r[c].evaluation.macro_f1).sum::<f64>() / self.reports.len() as f64;
                (budget, mean)
            })
            .collect()
    }

    pub fn final_reports(&self) -> impl Iterator<Item = &CycleReport> {
        self.reports.values().filter_map(|r| r.last())
    }
}

/// The full loop for every seed of `config`. With a writer, each seed's
/// reports, epoch log, manifest and checkpoints land in the run directory.
pub fn run_active_learning(config: &ExperimentConfig, writer: Option<&RunWriter>) -> Result<RunResult> {
    config.validate()?;
    let reports = per_seed(&config.seeds, |seed| {
        let mut session = Session::new(config.clone(), seed, LabelMode::Oracle)?;
        let cycles = config.cycles;
        while session.completed() <= cycles {
            let select = session.completed() < cycles;
            session.step(select, &mut quiet())?;
            if let Some(w) = writer {
                w.write_cycle(&session)?;
            }
            log::info!(
                "{} seed {seed} cycle {} macro F1 {:.4}",
                config.strategy.kind,
                session.completed() - 1,
                session.reports().last().expect("report").evaluation.macro_f1
            );
        }
        if let Some(w) = writer {
            w.write_session(&session)?;
        }
        Ok((seed, session.reports().to_vec()))
    })?;
    let result = RunResult {
        strategy: config.strategy.kind,
        reports: reports.into_iter().collect(),
    };
    if let Some(w) = writer {
        w.write_curves(&result.curve_points())?;
    }
    Ok(result)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: StrategyKind,
    /// `(budget, mean macro F1)` per cycle.
    pub mean_curve: Vec<(usize, f64)>,
    pub final_macro_f1: f64,
    pub final_spearman: Option<f64>,
    pub final_acc_top: Option<f64>,
    pub final_acc_bottom: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub runs: Vec<RunResult>,
    pub summaries: Vec<StrategySummary>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl StrategyComparison {
    pub fn curve_points(&self) -> Vec<CurvePoint> {
        self.runs.iter().flat_map(RunResult::curve_points).collect()
    }

    pub fn run(&self, kind: StrategyKind) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.strategy == kind)
    }

    pub fn summary(&self, kind: StrategyKind) -> Option<&StrategySummary> {
        self.summaries.iter().find(|s| s.strategy == kind)
    }
}

fn summarize(run: &RunResult) -> StrategySummary {
    let finals: Vec<&Evaluation> = run.final_reports().map(|r| &r.evaluation).collect();
    let n = finals.len().max(1) as f64;
    StrategySummary {
        strategy: run.strategy,
        mean_curve: run.mean_curve(),
        final_macro_f1: finals.iter().map(|e| e.macro_f1).sum::<f64>() / n,
        final_spearman: mean_of(finals.iter().map(|e| e.spearman.map(|s| s.rho))),
        final_acc_top: mean_of(finals.iter().map(|e| e.topk.map(|t| t.acc_top))),
        final_acc_bottom: mean_of(finals.iter().map(|e| e.topk.map(|t| t.acc_bottom))),
    }
}

/// One run per strategy on shared seeds and budgets.
pub fn run_strategy_comparison(
    config: &ExperimentConfig,
    strategies: &[StrategyKind],
    writer: Option<&RunWriter>,
) -> Result<StrategyComparison> {
    if strategies.is_empty() {
        return Err(Error::InvalidArgument("no strategies to compare".into()));
    }
    let mut runs = Vec::new();
    for &kind in strategies {
        let mut c = config.clone();
        c.strategy.kind = kind;
        let scoped = writer.map(|w| w.scoped(kind.name()));
        runs.push(run_active_learning(&c, scoped.as_ref())?);
    }
    let budgets = |r: &RunResult| -> Vec<Vec<usize>> { r.reports.values().map(|v| v.iter().map(|c| c.budget).collect()).collect() };
    let reference = budgets(&runs[0]);
    if let Some(bad) = runs.iter().find(|r| budgets(r) != reference) {
        return Err(Error::InvalidArgument(format!("{} ran at different budget points", bad.strategy)));
    }
    let comparison = StrategyComparison {
        summaries: runs.iter().map(summarize).collect(),
        runs,
    };
    if let Some(w) = writer {
        w.write_curves(&comparison.curve_points())?;
        w.write_json("comparison.json", &comparison.summaries)?;
    }
    Ok(comparison)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryF1 {
    pub weather: f64,
    pub light: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointSeed {
    pub seed: u64,
    pub budget: usize,
    pub joint: CategoryF1,
    /// Weather F1 of the weather-only model, light F1 of the light-only one.
    pub single: CategoryF1,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointReport {
    pub seeds: Vec<JointSeed>,
    pub mean_joint: CategoryF1,
    pub mean_single: CategoryF1,
}

impl JointReport {
    /// Categories where the joint model's mean F1 beats the single-head one.
    pub fn joint_wins(&self) -> Vec<&'static str> {
        let mut wins = Vec::new();
        if self.mean_joint.weather > self.mean_single.weather {
            wins.push("weather");
        }
        if self.mean_joint.light > self.mean_single.light {
            wins.push("light");
        }
        wins
    }
}

/// Two-head model against one single-head model per category: same
/// backbone, same base init, same labeled set (a stratified draw of the
/// final loop budget).
pub fn run_joint_vs_single(config: &ExperimentConfig, writer: Option<&RunWriter>) -> Result<JointReport> {
    config.validate()?;
    let mut fixed = config.clone();
    fixed.bootstrap = config.budget_at(config.cycles);
    fixed.cycles = 0;
    let seeds = per_seed(&config.seeds, |seed| {
        let session = Session::new(fixed.clone(), seed, LabelMode::Oracle)?;
        let mut job = session.job();
        let mut f1 = BTreeMap::new();
        for heads in [HeadSelection::Both, HeadSelection::Weather, HeadSelection::Light] {
            job.train.heads = heads;
            let model = job.run(&mut quiet())?.model;
            let e = session.evaluate(&model)?;
            f1.insert(heads as u8, CategoryF1 { weather: e.weather_f1, light: e.light_f1 });
        }
        Ok(JointSeed {
            seed,
            budget: job.len(),
            joint: f1[&(HeadSelection::Both as u8)],
            single: CategoryF1 {
                weather: f1[&(HeadSelection::Weather as u8)].weather,
                light: f1[&(HeadSelection::Light as u8)].light,
            },
        })
    })?;
    let n = seeds.len() as f64;
    let mean = |f: &dyn Fn(&JointSeed) -> f64| seeds.iter().map(f).sum::<f64>() / n;
    let report = JointReport {
        mean_joint: CategoryF1 {
            weather: mean(&|s| s.joint.weather),
            light: mean(&|s| s.joint.light),
        },
        mean_single: CategoryF1 {
            weather: mean(&|s| s.single.weather),
            light: mean(&|s| s.single.light),
        },
        seeds,
    };
    if let Some(w) = writer {
        w.write_json("joint_vs_single.json", &report)?;
    }
    Ok(report)
}

/// Trains on a fully labeled synthetic source pool and writes a checkpoint
/// that keeps the learned backbone. Heads and the loss-prediction module
/// are re-initialized, as when a pretrained classifier is replaced.
pub fn pretrain_source(config: &ExperimentConfig, path: &Path) -> Result<Model> {
    let pre = config
        .pretrain
        .as_ref()
        .ok_or_else(|| Error::Config("warm-start comparison needs a pretrain section".into()))?;
    if pre.source.side != config.model.backbone.input_side {
        return Err(Error::Config("source images must match the model input side".into()));
    }
    let mut source = synth_generate(&pre.source)?;
    let ids: Vec<u64> = source.ids().collect();
    source.oracle_label(&ids, 0.0, pre.seed, LabelProvenance::Bootstrap)?;
    let examples = source.learner().labeled(false);
    let train = TrainConfig {
        epochs: pre.epochs,
        seed: pre.seed,
        freeze_schedule: Default::default(),
        heads: HeadSelection::Both,
        ..config.train.clone()
    };
    let init = Model::build(config.model.clone(), pre.seed)?;
    let mut model = train_cycle(&init, &examples, &train, 0, &mut quiet())?.model;
    let fresh = Model::build(config.model.clone(), derive_seed(&[pre.seed, 1]))?;
    let layout = model.layout().to_vec();
    for (i, info) in layout.iter().enumerate() {
        if !matches!(info.unit, Unit::Stage(_)) {
            model.params_mut()[i] = fresh.params()[i].clone();
        }
    }
    model.set_provenance(Provenance::SourcePretrained);
    save_checkpoint(&model, path)?;
    Ok(model)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitRun {
    pub provenance: Provenance,
    /// Held-out macro F1 after every cycle-0 epoch.
    pub epoch_f1: Vec<f64>,
    /// First epoch (1-based) reaching the threshold in cycle 0.
    pub epochs_to_threshold: Option<usize>,
    pub final_macro_f1: f64,
    pub curve: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WarmstartSeed {
    pub seed: u64,
    pub warmstart: InitRun,
    pub random: InitRun,
}

impl WarmstartSeed {
    /// Warm start reached the threshold in strictly fewer epochs. A run
    /// that never reaches it counts as infinitely slow.
    pub fn warm_faster(&self) -> bool {
        match (self.warmstart.epochs_to_threshold, self.random.epochs_to_threshold) {
            (Some(w), Some(r)) => w < r,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WarmstartReport {
    pub threshold: f64,
    pub budget: usize,
    pub seeds: Vec<WarmstartSeed>,
}

impl WarmstartReport {
    pub fn faster_count(&self) -> usize {
        self.seeds.iter().filter(|s| s.warm_faster()).count()
    }

    pub fn mean_final(&self) -> (f64, f64) {
        let n = self.seeds.len() as f64;
        (
            self.seeds.iter().map(|s| s.warmstart.final_macro_f1).sum::<f64>() / n,
            self.seeds.iter().map(|s| s.random.final_macro_f1).sum::<f64>() / n,
        )
    }
}

fn init_run(config: &ExperimentConfig, seed: u64) -> Result<InitRun> {
    let mut session = Session::new(config.clone(), seed, LabelMode::Oracle)?;
    let provenance = session.base_model().provenance();
    let job = session.job();
    let eval = session.eval_set();
    let mut epoch_f1 = Vec::new();
    let trained = job.run(&mut |_, model| {
        epoch_f1.push(crate::metrics::evaluate(model, &eval, 0)?.macro_f1);
        Ok(())
    })?;
    drop(eval);
    session.complete_cycle(job, trained, config.cycles > 0)?;
    while session.completed() <= config.cycles {
        let select = session.completed() < config.cycles;
        session.step(select, &mut quiet())?;
    }
    let curve: Vec<(usize, f64)> = session.reports().iter().map(|r| (r.budget, r.evaluation.macro_f1)).collect();
    Ok(InitRun {
        provenance,
        epochs_to_threshold: epoch_f1.iter().position(|&f| f >= config.f1_threshold).map(|i| i + 1),
        epoch_f1,
        final_macro_f1: curve.last().map_or(0.0, |c| c.1),
        curve,
    })
}

/// Pretrains on the source pool, then runs the loop from that checkpoint
/// and from random init on every seed.
pub fn run_warmstart_vs_random(config: &ExperimentConfig, work_dir: &Path) -> Result<WarmstartReport> {
    config.validate()?;
    let ckpt = work_dir.join("checkpoints").join("source.ckpt");
    pretrain_source(config, &ckpt)?;
    let mut warm = config.clone();
    warm.init = InitPolicy::Warmstart { path: ckpt };
    let seeds = per_seed(&config.seeds, |seed| {
        Ok(WarmstartSeed {
            seed,
            warmstart: init_run(&warm, seed)?,
            random: init_run(config, seed)?,
        })
    })?;
    let report = WarmstartReport {
        threshold: config.f1_threshold,
        budget: config.bootstrap,
        seeds,
    };
    let mut text = serde_json::to_vec_pretty(&report)?;
    text.push(b'\n');
    let path = work_dir.join("warmstart_vs_random.json");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
