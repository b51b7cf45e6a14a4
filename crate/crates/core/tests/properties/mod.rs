//! Invariant suites run through proptest's runner with a fixed RNG, so the
//! core tests and the acceptance run share one definition and one case set.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use lpal_core::acquisition::{commit_auto_labels, score, select_top_k, triage, AcquisitionStrategy, StrategyKind, ThresholdPolicy, TriageThresholds};
use lpal_core::datapool::{synth_generate, LabelProvenance, Pool, SynthConfig};
use lpal_core::experiment::{ExperimentConfig, LabelMode, Session};
use lpal_core::metrics::f1_per_label;
use lpal_core::model::{BackboneConfig, LossPredHeadConfig, Model, ModelConfig, StageConfig, Unit};
use lpal_core::numerics::SgdConfig;
use lpal_core::train::{train_cycle, TrainConfig};
use lpal_core::LabelSet;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub const CASES: u32 = 128;

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn score_map() -> impl Strategy<Value = BTreeMap<u64, f32>> {
    // a small value set forces plenty of ties
    prop::collection::btree_map(0u64..500, prop_oneof![(-4i32..4).prop_map(|v| v as f32 * 0.25), -2.0f32..2.0], 0..60)
}

pub fn triage_partition(cases: u32) -> Result<(), String> {
    let thresholds = (-2.5f32..2.5, 0.0f32..3.0).prop_map(|(low, width)| (low, low + width));
    run(cases, (score_map(), thresholds), |(scores, (low, high))| {
        let r = triage(&scores, TriageThresholds::new(low, high).unwrap());
        prop_assert!(r.auto.is_disjoint(&r.human_queue));
        prop_assert!(r.auto.is_disjoint(&r.deferred));
        prop_assert!(r.human_queue.is_disjoint(&r.deferred));
        let union: BTreeSet<u64> = r.auto.iter().chain(&r.human_queue).chain(&r.deferred).copied().collect();
        prop_assert_eq!(union, scores.keys().copied().collect::<BTreeSet<_>>());
        for (id, s) in &scores {
            let expected = if *s < low {
                &r.auto
            } else if *s > high {
                &r.human_queue
            } else {
                &r.deferred
            };
            prop_assert!(expected.contains(id));
        }
        Ok(())
    })
}

pub fn top_k_matches_sort(cases: u32) -> Result<(), String> {
    run(cases, (score_map(), 0.0f64..=1.0), |(scores, frac)| {
        let k = (frac * scores.len() as f64).floor() as usize;
        let mut sorted: Vec<(u64, f32)> = scores.iter().map(|(&i, &s)| (i, s)).collect();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut oracle: Vec<u64> = sorted[..k].iter().map(|p| p.0).collect();
        oracle.sort_unstable();
        prop_assert_eq!(select_top_k(&scores, k).unwrap(), oracle);
        prop_assert!(select_top_k(&scores, scores.len() + 1).is_err());
        Ok(())
    })
}

/// F1 for every class of one category from a full confusion matrix.
pub fn confusion_f1(pred: &[usize], truth: &[usize]) -> [f64; 3] {
    let mut m = [[0usize; 3]; 3];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    let mut out = [0.0; 3];
    for c in 0..3 {
        let tp = m[c][c];
        let col: usize = (0..3).map(|t| m[t][c]).sum();
        let row: usize = m[c].iter().sum();
        let (fp, fn_) = (col - tp, row - tp);
        out[c] = if tp + fp + fn_ == 0 {
            1.0
        } else {
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        };
    }
    out
}

fn label() -> impl Strategy<Value = LabelSet> {
    (0usize..9).prop_map(|s| LabelSet::from_stratum(s).unwrap())
}

pub fn f1_matches_confusion(cases: u32) -> Result<(), String> {
    let aligned = (1usize..40).prop_flat_map(|n| (prop::collection::vec(label(), n), prop::collection::vec(label(), n)));
    run(cases, aligned, |(preds, truth)| {
        let got = f1_per_label(&preds, &truth).unwrap();
        let w = confusion_f1(
            &preds.iter().map(|l| l.weather.index()).collect::<Vec<_>>(),
            &truth.iter().map(|l| l.weather.index()).collect::<Vec<_>>(),
        );
        let l = confusion_f1(
            &preds.iter().map(|l| l.light.index()).collect::<Vec<_>>(),
            &truth.iter().map(|l| l.light.index()).collect::<Vec<_>>(),
        );
        for (g, o) in got.iter().zip(w.iter().chain(&l)) {
            prop_assert!((g - o).abs() < 1e-12, "{:?} vs {:?} {:?}", got, w, l);
        }
        Ok(())
    })
}

pub fn tiny_model(loss_pred: bool) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_side: 8,
            stages: vec![StageConfig { channels: 2, blocks: 1 }, StageConfig { channels: 3, blocks: 1 }],
            taps: vec![0, 1],
            residual: false,
        },
        loss_pred: loss_pred.then_some(LossPredHeadConfig { embed_dim: 2 }),
    }
}

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 4,
        optimizer: SgdConfig {
            base_lr: 0.1,
            momentum: 0.9,
            schedule: vec![],
        },
        seed,
        ..TrainConfig::default()
    }
}

fn labeled_pool(n: usize, seed: u64) -> Pool {
    let mut pool = synth_generate(&SynthConfig::uniform(n, 8, 0.05, seed)).unwrap();
    let ids: Vec<u64> = pool.ids().collect();
    pool.oracle_label(&ids, 0.0, seed, LabelProvenance::Bootstrap).unwrap();
    pool
}

pub fn freezing_is_bit_identical(cases: u32) -> Result<(), String> {
    // units: two stages, then the heads
    run(cases, (any::<u64>(), 4usize..12, 0usize..=3), |(seed, n, depth)| {
        let pool = labeled_pool(n, seed);
        let init = Model::build(tiny_model(true), seed ^ 7).unwrap();
        let config = TrainConfig {
            freeze_schedule: [(0, depth)].into_iter().collect(),
            ..tiny_train(seed)
        };
        let trained = train_cycle(&init, &pool.learner().labeled(false), &config, 0, &mut |_, _| Ok(())).unwrap().model;
        for ((info, before), after) in init.layout().iter().zip(init.params()).zip(trained.params()) {
            let frozen = match info.unit {
                Unit::Stage(s) => s + depth < 3,
                Unit::Heads => depth == 0,
                Unit::LossPred => false,
            };
            if frozen {
                prop_assert_eq!(before.data(), after.data(), "{} moved at depth {}", info.name, depth);
            }
        }
        Ok(())
    })
}

pub fn lambda_zero_decouples(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 4usize..12, 0.0f32..2.0), |(seed, n, margin)| {
        let pool = labeled_pool(n, seed);
        let data = pool.learner().labeled(false);
        let config = TrainConfig {
            lambda: 0.0,
            margin,
            ..tiny_train(seed)
        };
        let with_lp = Model::build(tiny_model(true), seed).unwrap();
        let ablated = Model::build(tiny_model(false), seed).unwrap();
        let a = train_cycle(&with_lp, &data, &config, 0, &mut |_, _| Ok(())).unwrap().model;
        let b = train_cycle(&ablated, &data, &config, 0, &mut |_, _| Ok(())).unwrap().model;
        for (info, p) in b.layout().iter().zip(b.params()) {
            prop_assert_eq!(a.param(&info.name).unwrap().data(), p.data(), "{}", info.name);
        }
        for (info, p) in a.layout().iter().zip(a.params()) {
            if info.unit == Unit::LossPred {
                prop_assert_eq!(p.data(), with_lp.param(&info.name).unwrap().data());
            }
        }
        Ok(())
    })
}

fn strategy_kind() -> impl Strategy<Value = StrategyKind> {
    prop_oneof![
        Just(StrategyKind::PredictedLoss),
        Just(StrategyKind::Entropy),
        Just(StrategyKind::LeastConfidence),
        Just(StrategyKind::Random),
    ]
}

pub fn learner_path_ignores_truth(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 8usize..20, 2usize..6, strategy_kind(), 0usize..9), |(seed, n, labeled, kind, stratum)| {
        let mut pool = synth_generate(&SynthConfig::uniform(n, 8, 0.05, seed)).unwrap();
        let ids: Vec<u64> = pool.ids().take(labeled).collect();
        pool.oracle_label(&ids, 0.0, seed, LabelProvenance::Bootstrap).unwrap();
        let mut poisoned = pool.with_poisoned_truths(LabelSet::from_stratum(stratum).unwrap());
        let init = Model::build(tiny_model(true), seed).unwrap();
        let strategy = AcquisitionStrategy::new(kind, seed);
        let mut pool = pool;
        let outcome = |p: &mut Pool| {
            let model = train_cycle(&init, &p.learner().labeled(false), &tiny_train(seed), 0, &mut |_, _| Ok(())).unwrap().model;
            let scores = score(&model, &p.learner().candidates(), strategy).unwrap();
            let reference: Vec<f32> = score(&model, &p.learner().all(), strategy).unwrap().into_values().collect();
            let thresholds = ThresholdPolicy::default().calibrate(&reference).unwrap();
            let r = triage(&scores, thresholds);
            let auto: Vec<u64> = r.auto.iter().copied().collect();
            let written = commit_auto_labels(&model, p, &auto).unwrap();
            (model.params().to_vec(), scores, r, written, p.learner().labeled(true).iter().map(|e| (e.id, e.label)).collect::<Vec<_>>())
        };
        let (pa, sa, ra, wa, la) = outcome(&mut pool);
        let (pb, sb, rb, wb, lb) = outcome(&mut poisoned);
        prop_assert!(pa.iter().zip(&pb).all(|(x, y)| x.data() == y.data()));
        prop_assert_eq!(sa, sb);
        prop_assert_eq!(ra, rb);
        prop_assert_eq!(wa, wb);
        prop_assert_eq!(la, lb);
        Ok(())
    })
}

fn session_config(n: usize, bootstrap: usize, per_cycle: usize, cycles: usize, kind: StrategyKind, auto_label: bool, train_on_auto: bool) -> ExperimentConfig {
    let value = serde_json::json!({
        "data": { "kind": "synth", "n": n, "side": 8, "noise_sigma": 0.05, "seed": 11,
                  "priors": [0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1] },
        "bootstrap": bootstrap,
        "per_cycle": per_cycle,
        "cycles": cycles,
        "model": tiny_model(true),
        "train": tiny_train(0),
        "strategy": { "kind": kind },
        "auto_label": auto_label,
        "train_on_auto": train_on_auto,
        "eval_k": 2
    });
    ExperimentConfig::from_json(value.to_string().as_bytes()).unwrap()
}

pub fn budget_is_conserved(cases: u32) -> Result<(), String> {
    let params = (any::<u64>(), 5usize..16, 1usize..8, 0usize..4, strategy_kind(), any::<bool>(), any::<bool>());
    run(cases, params, |(seed, bootstrap, per_cycle, cycles, kind, auto_label, train_on_auto)| {
        let config = session_config(70, bootstrap, per_cycle, cycles, kind, auto_label, train_on_auto);
        let mut session = Session::new(config, seed, LabelMode::Oracle).unwrap();
        let size = session.pool().len();
        session.run_all(&mut |_, _| Ok(())).unwrap();
        let reports = session.reports();
        prop_assert_eq!(reports.len(), cycles + 1);
        let mut auto_written = 0;
        for (c, r) in reports.iter().enumerate() {
            prop_assert_eq!(r.cycle, c);
            prop_assert_eq!(r.budget, bootstrap + c * per_cycle);
            prop_assert_eq!(r.counts.total(), size);
            prop_assert_eq!(r.counts.queued, 0);
            match &r.selection {
                Some(s) => {
                    prop_assert!(c < cycles);
                    prop_assert_eq!(s.selected.len(), per_cycle);
                    auto_written += s.auto_labeled;
                    prop_assert!(auto_label || s.auto_labeled == 0);
                }
                None => prop_assert_eq!(c, cycles),
            }
            // human labels after cycle c's selection
            let after = bootstrap + (c + usize::from(c < cycles)) * per_cycle;
            prop_assert_eq!(r.counts.human_labeled, after);
            // human queries may later override auto labels
            prop_assert!(r.counts.auto_labeled <= auto_written);
            if !train_on_auto {
                prop_assert_eq!(r.auto_in_training, 0);
            }
        }
        Ok(())
    })
}

/// Every suite with its name.
pub fn suites() -> Vec<(&'static str, fn(u32) -> Result<(), String>)> {
    vec![
        ("triage partition", triage_partition),
        ("top-k vs sort oracle", top_k_matches_sort),
        ("F1 vs confusion oracle", f1_matches_confusion),
        ("freezing bit-identity", freezing_is_bit_identical),
        ("lambda=0 decoupling", lambda_zero_decouples),
        ("truth-hiding audit", learner_path_ignores_truth),
        ("budget conservation", budget_is_conserved),
    ]
}
