use std::collections::{BTreeMap, BTreeSet};

use lpal_core::acquisition::{
    commit_auto_labels, score, score_pool, select_top_k, triage, AcquisitionStrategy, StrategyKind, TriageThresholds,
};
use lpal_core::datapool::{synth_generate, LabelProvenance, SynthConfig};
use lpal_core::model::{BackboneConfig, LossPredHeadConfig, Model, ModelConfig, StageConfig};
use lpal_core::numerics::SgdConfig;
use lpal_core::train::{train_cycle, TrainConfig};
use lpal_core::{Light, Weather};
use proptest::prelude::*;

fn small_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_side: 16,
            stages: vec![StageConfig { channels: 8, blocks: 1 }, StageConfig { channels: 16, blocks: 1 }],
            taps: vec![0, 1],
            residual: false,
        },
        loss_pred: Some(LossPredHeadConfig { embed_dim: 8 }),
    }
}

#[test]
fn zeroed_loss_head_scores_zero() {
    let pool = synth_generate(&SynthConfig::uniform(20, 16, 0.02, 4)).unwrap();
    let mut model = Model::build(small_config(), 2).unwrap();
    model.param_mut("loss_pred.out.weight").unwrap().data_mut().fill(0.0);
    model.param_mut("loss_pred.out.bias").unwrap().data_mut().fill(0.0);
    let scores = score(&model, &pool.learner().candidates(), AcquisitionStrategy::default()).unwrap();
    assert_eq!(scores.len(), 20);
    assert!(scores.values().all(|&s| s == 0.0));
}

#[test]
fn scoring_rejects_empty_and_ablated() {
    let model = Model::build(small_config(), 2).unwrap();
    assert!(score(&model, &[], AcquisitionStrategy::default()).is_err());
    let ablated = Model::build(ModelConfig { loss_pred: None, ..small_config() }, 2).unwrap();
    let pool = synth_generate(&SynthConfig::uniform(4, 16, 0.02, 4)).unwrap();
    let candidates = pool.learner().candidates();
    assert!(score(&ablated, &candidates, AcquisitionStrategy::default()).is_err());
    assert!(score(&ablated, &candidates, AcquisitionStrategy::new(StrategyKind::Entropy, 0)).is_ok());
}

#[test]
fn scoring_and_selection_are_deterministic() {
    let mut pool = synth_generate(&SynthConfig::uniform(40, 16, 0.02, 8)).unwrap();
    let model = Model::build(small_config(), 5).unwrap();
    for kind in [StrategyKind::PredictedLoss, StrategyKind::Entropy, StrategyKind::LeastConfidence, StrategyKind::Random] {
        let strategy = AcquisitionStrategy::new(kind, 17);
        let a = score(&model, &pool.learner().candidates(), strategy).unwrap();
        let b = score_pool(&model, &mut pool, strategy).unwrap();
        assert_eq!(a, b, "{kind}");
        assert_eq!(select_top_k(&a, 10).unwrap(), select_top_k(&b, 10).unwrap());
        let cached = pool.learner().sample(3).unwrap().predicted_loss;
        assert_eq!(cached, Some(a[&3]));
    }
}

#[test]
fn auto_labels_respect_annotator_precedence() {
    let mut pool = synth_generate(&SynthConfig::uniform(10, 16, 0.02, 1)).unwrap();
    let model = Model::build(small_config(), 5).unwrap();
    let before = pool.manifest();
    assert!(commit_auto_labels(&model, &mut pool, &[]).unwrap().is_empty());
    assert_eq!(pool.manifest(), before);

    pool.oracle_label(&[2], 0.0, 0, LabelProvenance::Human).unwrap();
    let human = pool.learner().sample(2).unwrap().working_label;
    let written = commit_auto_labels(&model, &mut pool, &[2, 3]).unwrap();
    assert_eq!(written.keys().copied().collect::<Vec<_>>(), vec![3]);
    let s2 = pool.learner().sample(2).unwrap();
    assert_eq!((s2.working_label, s2.provenance), (human, LabelProvenance::Human));
    assert_eq!(pool.audit_log().len(), 1);
    assert_eq!(pool.audit_log()[0].id, 2);
    assert_eq!(pool.learner().sample(3).unwrap().provenance, LabelProvenance::Auto);
}

#[test]
fn overfit_model_auto_labels_match_truth() {
    // clear weather only, no noise: light is a pure luminance level
    let mut priors = vec![0.0; 9];
    priors[..3].fill(1.0 / 3.0);
    let config = SynthConfig {
        priors,
        ..SynthConfig::uniform(80, 16, 0.0, 21)
    };
    let mut pool = synth_generate(&config).unwrap();
    let train_ids: Vec<u64> = (0..30).collect();
    pool.oracle_label(&train_ids, 0.0, 0, LabelProvenance::Bootstrap).unwrap();
    let tc = TrainConfig {
        epochs: 40,
        batch_size: 10,
        optimizer: SgdConfig {
            base_lr: 0.05,
            momentum: 0.9,
            schedule: vec![],
        },
        grad_clip: Some(1.0),
        ..TrainConfig::default()
    };
    let base = Model::build(small_config(), 3).unwrap();
    let model = train_cycle(&base, &pool.learner().labeled(false), &tc, 0, &mut |_, _| Ok(())).unwrap().model;
    let auto: Vec<u64> = (30..80).collect();
    let written = commit_auto_labels(&model, &mut pool, &auto).unwrap();
    assert_eq!(written.len(), 50);
    let oracle = pool.oracle();
    for (id, label) in written {
        assert_eq!(Some(label), oracle.truth(id), "sample {id}");
    }
}

#[test]
fn overfit_check_uses_every_light_level() {
    // guards the test above against a degenerate single-level draw
    let mut priors = vec![0.0; 9];
    priors[..3].fill(1.0 / 3.0);
    let pool = synth_generate(&SynthConfig {
        priors,
        ..SynthConfig::uniform(80, 16, 0.0, 21)
    })
    .unwrap();
    let levels: BTreeSet<Light> = pool.ids().filter(|&id| id >= 30).map(|id| pool.oracle().truth(id).unwrap().light).collect();
    assert_eq!(levels.len(), 3);
    assert!(pool.ids().all(|id| pool.oracle().truth(id).unwrap().weather == Weather::Clear));
}

fn score_map() -> impl Strategy<Value = BTreeMap<u64, f32>> {
    // a small value set forces plenty of ties
    prop::collection::btree_map(0u64..500, prop_oneof![(-4i32..4).prop_map(|v| v as f32 * 0.25), -2.0f32..2.0], 0..60)
}

fn thresholds() -> impl Strategy<Value = (f32, f32)> {
    (-2.5f32..2.5, 0.0f32..3.0).prop_map(|(low, width)| (low, low + width))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn triage_partitions_scored_ids(scores in score_map(), (low, high) in thresholds()) {
        let r = triage(&scores, TriageThresholds::new(low, high).unwrap());
        prop_assert!(r.auto.is_disjoint(&r.human_queue));
        prop_assert!(r.auto.is_disjoint(&r.deferred));
        prop_assert!(r.human_queue.is_disjoint(&r.deferred));
        let union: BTreeSet<u64> = r.auto.iter().chain(&r.human_queue).chain(&r.deferred).copied().collect();
        prop_assert_eq!(union, scores.keys().copied().collect::<BTreeSet<_>>());
    }

    #[test]
    fn top_k_matches_pairwise_oracle(scores in score_map(), frac in 0.0f64..=1.0) {
        let k = (frac * scores.len() as f64).floor() as usize;
        let got: BTreeSet<u64> = select_top_k(&scores, k).unwrap().into_iter().collect();
        // an id is chosen iff fewer than k ids beat it
        let oracle: BTreeSet<u64> = scores
            .iter()
            .filter(|&(&i, &si)| {
                scores.iter().filter(|&(&j, &sj)| sj > si || (sj == si && j < i)).count() < k
            })
            .map(|(&i, _)| i)
            .collect();
        prop_assert_eq!(got.len(), k);
        prop_assert_eq!(got, oracle);
        prop_assert!(select_top_k(&scores, scores.len() + 1).is_err());
    }

    #[test]
    fn triage_is_monotone_in_thresholds(scores in score_map(), (low, high) in thresholds(), bump in 0.0f32..1.0) {
        let base = triage(&scores, TriageThresholds::new(low, high).unwrap());
        let raised_low = triage(&scores, TriageThresholds::new((low + bump).min(high), high).unwrap());
        prop_assert!(base.auto.is_subset(&raised_low.auto));
        let raised_high = triage(&scores, TriageThresholds::new(low, high + bump).unwrap());
        prop_assert!(raised_high.human_queue.is_subset(&base.human_queue));
    }
}
