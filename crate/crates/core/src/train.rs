//! One training cycle: joint minimization of the task loss and the
//! loss-prediction loss, with per-cycle freezing and a fixed base init.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapool::{LabeledExample, LearnerSample};
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::model::{argmax, load_checkpoint, stack_images, Model, ModelConfig};
use crate::numerics::{LrStep, Scalar, Sgd, SgdConfig, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpLossKind {
    #[default]
    Ranking,
    Mse,
}

/// Which heads contribute to the task loss. `Weather` and `Light` train a
/// single-head model; the other head's parameters never receive gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadSelection {
    #[default]
    Both,
    Weather,
    Light,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitPolicy {
    Random { seed: u64 },
    Warmstart { path: PathBuf },
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::Random { seed: 0 }
    }
}

impl InitPolicy {
    /// The base model every cycle restarts from.
    pub fn base_model(&self, config: &ModelConfig) -> Result<Model> {
        match self {
            InitPolicy::Random { seed } => Model::build(config.clone(), *seed),
            InitPolicy::Warmstart { path } => load_checkpoint(path, config),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    /// Learning-rate multipliers keyed by epoch, applied on top of
    /// `optimizer.schedule` (which counts steps).
    pub epoch_schedule: Vec<LrStep>,
    /// Weight of the loss-prediction loss.
    pub lambda: f32,
    /// Ranking margin.
    pub margin: f32,
    pub lp_loss: LpLossKind,
    /// Cycle → trainable suffix depth. A cycle without an entry uses the
    /// closest earlier one; before the first entry everything trains.
    pub freeze_schedule: BTreeMap<usize, usize>,
    pub heads: HeadSelection,
    /// Rescales the gradient when its global L2 norm exceeds this value.
    pub grad_clip: Option<f32>,
    /// Seeds batch order and pair shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: SgdConfig::default(),
            epoch_schedule: Vec::new(),
            lambda: 1.0,
            margin: 1.0,
            lp_loss: LpLossKind::Ranking,
            freeze_schedule: BTreeMap::new(),
            heads: HeadSelection::Both,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Config(format!("margin {} must be > 0", self.margin)));
        }
        if self.lp_loss == LpLossKind::Ranking && self.batch_size % 2 == 1 {
            return Err(Error::Config(format!(
                "ranking loss pairs samples, batch size {} must be even",
                self.batch_size
            )));
        }
        if self.grad_clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        if self.epoch_schedule.iter().any(|s| !(s.multiplier.is_finite() && s.multiplier > 0.0)) {
            return Err(Error::Config("learning-rate multipliers must be positive".into()));
        }
        Ok(())
    }

    /// Trainable suffix depth for `cycle`, or `None` when nothing is frozen.
    pub fn depth_for(&self, cycle: usize) -> Option<usize> {
        self.freeze_schedule.range(..=cycle).next_back().map(|(_, &d)| d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub cycle: usize,
    pub epoch: usize,
    pub task_loss: f64,
    pub lp_loss: f64,
    pub weather_accuracy: f64,
    pub light_accuracy: f64,
    pub learning_rate: f32,
    pub seconds: f64,
}

/// Outcome of [`train_cycle`].
pub struct Trained {
    pub model: Model,
    pub epochs: Vec<EpochStats>,
}

/// Training examples from learner samples; every sample must carry a label.
pub fn labeled_examples<'a>(samples: &[LearnerSample<'a>]) -> Result<Vec<LabeledExample<'a>>> {
    samples
        .iter()
        .map(|s| {
            s.working_label
                .map(|label| LabeledExample {
                    id: s.id,
                    image: s.image,
                    label,
                })
                .ok_or(Error::MissingLabel(s.id))
        })
        .collect()
}

/// Per-sample task loss `[N]` for the selected heads.
pub fn task_loss_per_sample<T: Scalar>(
    tape: &mut Tape<T>,
    weather_logits: Var,
    light_logits: Var,
    labels: &[LabelSet],
    heads: HeadSelection,
) -> Result<Var> {
    let weather: Vec<usize> = labels.iter().map(|l| l.weather.index()).collect();
    let light: Vec<usize> = labels.iter().map(|l| l.light.index()).collect();
    Ok(match heads {
        HeadSelection::Both => {
            let w = tape.cross_entropy_per_sample(weather_logits, &weather)?;
            let l = tape.cross_entropy_per_sample(light_logits, &light)?;
            tape.add(w, l)?
        }
        HeadSelection::Weather => tape.cross_entropy_per_sample(weather_logits, &weather)?,
        HeadSelection::Light => tape.cross_entropy_per_sample(light_logits, &light)?,
    })
}

/// Both-head task loss on plain logits: `(mean, per-sample)`. Missing
/// labels are rejected.
pub fn task_loss(
    weather_logits: &[[f32; 3]],
    light_logits: &[[f32; 3]],
    labels: &[Option<LabelSet>],
) -> Result<(f64, Vec<f64>)> {
    if weather_logits.len() != labels.len() || light_logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} weather rows, {} light rows, {} labels",
            weather_logits.len(),
            light_logits.len(),
            labels.len()
        )));
    }
    let mut per_sample = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        let label = label.ok_or(Error::MissingLabel(i as u64))?;
        let (_, w) = crate::numerics::stable_softmax_nll(&weather_logits[i][..], label.weather.index());
        let (_, l) = crate::numerics::stable_softmax_nll(&light_logits[i][..], label.light.index());
        per_sample.push(w + l);
    }
    let mean = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    };
    Ok((mean, per_sample))
}

/// Shuffles `0..n` and pairs neighbours; an odd leftover is dropped.
pub fn shuffled_pairs(n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks_exact(2).map(|p| (p[0], p[1])).collect()
}

/// Pairwise margin loss `mean max(0, −sign(tᵢ−tⱼ)(pᵢ−pⱼ) + ξ)` over `pairs`.
/// `target` is read as a value only; no gradient reaches it.
pub fn ranking_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    pairs: &[(usize, usize)],
    margin: T,
) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) || tape.shape(pred).len() != 1 {
        return Err(Error::Shape(format!(
            "ranking loss wants equal [N] vectors, got {:?} and {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("ranking loss needs at least one pair".into()));
    }
    let t = tape.value(target).data();
    let signs: Vec<T> = pairs
        .iter()
        .map(|&(i, j)| {
            let d = t[i] - t[j];
            if d > T::zero() {
                -T::one()
            } else if d < T::zero() {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let pi = tape.index_select(pred, &is)?;
    let pj = tape.index_select(pred, &js)?;
    let gap = tape.sub(pi, pj)?;
    let signs = tape.constant(Tensor::new([pairs.len()], signs)?);
    let signed = tape.mul(gap, signs)?;
    let hinge = tape.add_scalar(signed, margin);
    let hinge = tape.relu(hinge);
    Ok(tape.mean(hinge))
}

/// Mean squared error against detached targets.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let target = tape.detach(target);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Ranking loss on plain vectors with a fresh shuffled pairing.
pub fn lp_loss_ranking(pred: &[f32], target: &[f32], margin: f32, rng: &mut ChaCha8Rng) -> Result<f32> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    if pred.len() % 2 == 1 {
        return Err(Error::InvalidArgument(format!("ranking loss needs an even batch, got {}", pred.len())));
    }
    let pairs = shuffled_pairs(pred.len(), rng);
    let mut tape = Tape::<f32>::new();
    let p = tape.constant(Tensor::new([pred.len()], pred.to_vec())?);
    let t = tape.constant(Tensor::new([target.len()], target.to_vec())?);
    let loss = ranking_loss(&mut tape, p, t, &pairs, margin)?;
    tape.value(loss).item()
}

/// Mean squared error on plain vectors.
pub fn lp_loss_mse(pred: &[f32], target: &[f32]) -> Result<f32> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(target).map(|(&p, &t)| (p as f64 - t as f64).powi(2)).sum();
    Ok((sum / pred.len() as f64) as f32)
}

/// Trains a copy of `init` on `labeled` for one cycle. `observer` sees the
/// stats and current model after every epoch.
pub fn train_cycle(
    init: &Model,
    labeled: &[LabeledExample<'_>],
    config: &TrainConfig,
    cycle: usize,
    observer: &mut dyn FnMut(&EpochStats, &Model) -> Result<()>,
) -> Result<Trained> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one labeled sample".into()));
    }
    let mut model = init.clone();
    let side = model.config().backbone.input_side;
    let trainable = match config.depth_for(cycle) {
        Some(d) => model.freeze_prefix(d)?,
        None => vec![true; model.params().len()],
    };
    let use_lp = config.lambda > 0.0 && model.config().loss_pred.is_some();

    let steps_per_epoch = labeled.len().div_ceil(config.batch_size) as u64;
    let mut sgd_config = config.optimizer.clone();
    sgd_config.schedule.extend(config.epoch_schedule.iter().map(|s| LrStep {
        at: s.at * steps_per_epoch,
        multiplier: s.multiplier,
    }));
    let mut sgd = Sgd::new(sgd_config, model.params())?;

    // separate streams so batch order does not depend on the lp settings
    let stream = config.seed ^ (cycle as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(stream);
    let mut pair_rng = ChaCha8Rng::seed_from_u64(stream ^ 0x5A5A_5A5A_5A5A_5A5A);

    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut batch_rng);
        let (mut task_sum, mut lp_sum, mut lp_batches) = (0.0f64, 0.0f64, 0usize);
        let (mut weather_hits, mut light_hits) = (0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let images: Vec<&[f32]> = batch.iter().map(|&i| labeled[i].image).collect();
            let labels: Vec<LabelSet> = batch.iter().map(|&i| labeled[i].label).collect();
            let mut tape = Tape::new();
            let input = tape.constant(stack_images(&images, side)?);
            let vars = model.forward_on(&mut tape, input, &trainable)?;
            let per_sample = task_loss_per_sample(&mut tape, vars.weather_logits, vars.light_logits, &labels, config.heads)?;
            let task = tape.mean(per_sample);
            task_sum += tape.value(task).item()? as f64 * batch.len() as f64;
            weather_hits += hits(tape.value(vars.weather_logits), labels.iter().map(|l| l.weather.index()));
            light_hits += hits(tape.value(vars.light_logits), labels.iter().map(|l| l.light.index()));

            let mut loss = task;
            if use_lp && batch.len() >= 2 {
                let target = tape.detach(per_sample);
                let lp = match config.lp_loss {
                    LpLossKind::Ranking => {
                        let pairs = shuffled_pairs(batch.len(), &mut pair_rng);
                        ranking_loss(&mut tape, vars.predicted_loss, target, &pairs, config.margin)?
                    }
                    LpLossKind::Mse => mse_loss(&mut tape, vars.predicted_loss, target)?,
                };
                lp_sum += tape.value(lp).item()? as f64;
                lp_batches += 1;
                let weighted = tape.scale(lp, config.lambda);
                loss = tape.add(task, weighted)?;
            }

            let mut grads = tape.backward(loss)?;
            let mut grads: Vec<Tensor> = vars
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.take_or_zeros(v, p))
                .collect();
            if let Some(clip) = config.grad_clip {
                clip_global_norm(&mut grads, &trainable, clip);
            }
            sgd.step(model.params_mut(), &grads, &trainable)?;
        }
        let n = labeled.len() as f64;
        let stats = EpochStats {
            cycle,
            epoch,
            task_loss: task_sum / n,
            lp_loss: if lp_batches > 0 { lp_sum / lp_batches as f64 } else { 0.0 },
            weather_accuracy: weather_hits as f64 / n,
            light_accuracy: light_hits as f64 / n,
            learning_rate: sgd.current_lr(),
            seconds: started.elapsed().as_secs_f64(),
        };
        if !(stats.task_loss.is_finite() && stats.lp_loss.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "training diverged in cycle {cycle} epoch {epoch}: task {} lp {}",
                stats.task_loss, stats.lp_loss
            )));
        }
        observer(&stats, &model)?;
        history.push(stats);
    }
    model.set_provenance(crate::model::Provenance::CycleTrained);
    Ok(Trained { model, epochs: history })
}

/// Scales the trainable gradients down so their joint L2 norm is at most `clip`.
pub fn clip_global_norm(grads: &mut [Tensor], trainable: &[bool], clip: f32) -> f64 {
    let norm = grads
        .iter()
        .zip(trainable)
        .filter(|(_, &t)| t)
        .flat_map(|(g, _)| g.data())
        .map(|&x| x as f64 * x as f64)
        .sum::<f64>()
        .sqrt();
    if norm > clip as f64 {
        let factor = (clip as f64 / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
    norm
}

fn hits(logits: &Tensor, targets: impl Iterator<Item = usize>) -> usize {
    logits
        .data()
        .chunks_exact(3)
        .zip(targets)
        .filter(|(row, t)| argmax(row) == *t)
        .count()
}
