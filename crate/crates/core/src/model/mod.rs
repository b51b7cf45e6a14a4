//! Convolutional backbone with weather and light heads, plus the
//! loss-prediction module tapped off the stage outputs.

mod checkpoint;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::error::{shape_err, Error, Result};
use crate::labels::{LabelSet, Light, Weather};
use crate::numerics::{Tape, Tensor, Var};

pub const NUM_WEATHER: usize = 3;
pub const NUM_LIGHT: usize = 3;
/// Subtracted from every pixel before the first convolution.
pub const INPUT_CENTER: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Side of the square single-channel input.
    pub input_side: usize,
    /// Every stage after the first opens with a stride-2 convolution.
    pub stages: Vec<StageConfig>,
    /// Stage indices feeding the loss-prediction module.
    pub taps: Vec<usize>,
    #[serde(default)]
    pub residual: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_side: 32,
            stages: vec![
                StageConfig { channels: 16, blocks: 2 },
                StageConfig { channels: 32, blocks: 2 },
                StageConfig { channels: 64, blocks: 2 },
            ],
            taps: vec![0, 1, 2],
            residual: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossPredHeadConfig {
    pub embed_dim: usize,
}

impl Default for LossPredHeadConfig {
    fn default() -> Self {
        Self { embed_dim: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// `None` ablates the loss-prediction module entirely.
    #[serde(default = "default_loss_pred")]
    pub loss_pred: Option<LossPredHeadConfig>,
}

fn default_loss_pred() -> Option<LossPredHeadConfig> {
    Some(LossPredHeadConfig::default())
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            loss_pred: default_loss_pred(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if b.input_side == 0 {
            return Err(Error::Config("input side must be positive".into()));
        }
        if let Some(s) = b.stages.iter().find(|s| s.channels == 0 || s.blocks == 0) {
            return Err(Error::Config(format!("stage {s:?} needs positive channels and blocks")));
        }
        if let Some(&t) = b.taps.iter().find(|&&t| t >= b.stages.len()) {
            return Err(Error::Config(format!("tap {t} names no stage (have {})", b.stages.len())));
        }
        if let Some(lp) = &self.loss_pred {
            if lp.embed_dim == 0 {
                return Err(Error::Config("loss-prediction embedding width must be >= 1".into()));
            }
            if b.taps.is_empty() {
                return Err(Error::Config("loss-prediction module needs at least one tap".into()));
            }
        }
        Ok(())
    }

    /// Short hash identifying the parameter layout.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&canonical)[..8])
    }

    /// Spatial side of each stage's output.
    pub fn stage_sides(&self) -> Vec<usize> {
        let mut side = self.backbone.input_side;
        (0..self.backbone.stages.len())
            .map(|i| {
                if i > 0 {
                    side = (side + 2 - 3) / 2 + 1;
                }
                side
            })
            .collect()
    }

    /// Parameter count from the configuration alone.
    pub fn param_count(&self) -> usize {
        let b = &self.backbone;
        let mut total = 0;
        let mut c_in = 1;
        for s in &b.stages {
            total += c_in * 9 * s.channels + s.channels;
            total += (s.blocks - 1) * (s.channels * 9 * s.channels + s.channels);
            c_in = s.channels;
        }
        total += c_in * NUM_WEATHER + NUM_WEATHER + c_in * NUM_LIGHT + NUM_LIGHT;
        if let Some(lp) = &self.loss_pred {
            let d = lp.embed_dim;
            for &t in &b.taps {
                total += b.stages[t].channels * d + d;
            }
            total += b.taps.len() * d + 1;
        }
        total
    }

    /// Number of freezable units: each stage, then the heads as one unit.
    pub fn unit_count(&self) -> usize {
        self.backbone.stages.len() + 1
    }
}

/// Structural unit a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Stage(usize),
    Heads,
    LossPred,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub unit: Unit,
    pub shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RandomInit,
    SourcePretrained,
    CycleTrained,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Vec<ParamInfo>,
    params: Vec<Tensor>,
    seed: u64,
    provenance: Provenance,
}

/// Per-sample network outputs, aligned with the input batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub weather_logits: Vec<[f32; NUM_WEATHER]>,
    pub light_logits: Vec<[f32; NUM_LIGHT]>,
    pub predicted_loss: Vec<f32>,
}

impl ModelOutput {
    pub fn len(&self) -> usize {
        self.predicted_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted_loss.is_empty()
    }

    pub fn extend(&mut self, other: ModelOutput) {
        self.weather_logits.extend(other.weather_logits);
        self.light_logits.extend(other.light_logits);
        self.predicted_loss.extend(other.predicted_loss);
    }

    pub fn empty() -> Self {
        Self {
            weather_logits: Vec::new(),
            light_logits: Vec::new(),
            predicted_loss: Vec::new(),
        }
    }

    /// Argmax of each head; lowest index wins ties.
    pub fn argmax_labels(&self) -> Vec<LabelSet> {
        self.weather_logits
            .iter()
            .zip(&self.light_logits)
            .map(|(w, l)| {
                LabelSet::new(
                    Weather::from_index(argmax(w)).expect("3 weather logits"),
                    Light::from_index(argmax(l)).expect("3 light logits"),
                )
            })
            .collect()
    }
}

pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Vars produced by one recorded forward pass.
pub struct ForwardVars {
    pub weather_logits: Var,
    pub light_logits: Var,
    /// Shape `[N]`.
    pub predicted_loss: Var,
    /// Stage outputs in order.
    pub stage_outputs: Vec<Var>,
    /// Leaf for each parameter, in layout order.
    pub params: Vec<Var>,
}

impl Model {
    /// Fresh model with fan-in scaled uniform weights and zero biases.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .iter()
            .map(|info| init_param(info, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            layout,
            params,
            seed,
            provenance: Provenance::RandomInit,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<Tensor>,
        seed: u64,
        provenance: Provenance,
    ) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        if layout.len() != params.len() || layout.iter().zip(&params).any(|(i, p)| i.shape != p.shape()) {
            return Err(shape_err!("parameter tensors do not match the configured layout"));
        }
        Ok(Self {
            config,
            layout,
            params,
            seed,
            provenance,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamInfo] {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn set_provenance(&mut self, provenance: Provenance) {
        self.provenance = provenance;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_index(name).map(move |i| &mut self.params[i])
    }

    /// Trainability mask for `trainable_suffix_depth`: the last `depth` units
    /// (stages, then heads) train; the loss-prediction module always trains.
    pub fn freeze_prefix(&self, trainable_suffix_depth: usize) -> Result<Vec<bool>> {
        let units = self.config.unit_count();
        if trainable_suffix_depth > units {
            return Err(Error::InvalidArgument(format!(
                "trainable depth {trainable_suffix_depth} exceeds {units} units"
            )));
        }
        let first_trainable = units - trainable_suffix_depth;
        Ok(self
            .layout
            .iter()
            .map(|info| match info.unit {
                Unit::Stage(s) => s >= first_trainable,
                Unit::Heads => units - 1 >= first_trainable,
                Unit::LossPred => true,
            })
            .collect())
    }

    /// Records the forward pass on `tape`. Parameters with `trainable[i]`
    /// become gradient-tracked leaves, the rest constants.
    pub fn forward_on(&self, tape: &mut Tape, input: Var, trainable: &[bool]) -> Result<ForwardVars> {
        if trainable.len() != self.params.len() {
            return Err(shape_err!("trainability mask has {} entries for {} params", trainable.len(), self.params.len()));
        }
        self.check_input(tape.value(input))?;
        let n = tape.shape(input)[0];
        let params: Vec<Var> = self
            .params
            .iter()
            .zip(trainable)
            .map(|(p, &t)| tape.leaf(p.clone(), t))
            .collect();
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("layout and forward agree");

        // inputs live in [0, 1]; the network sees them centered on zero
        let mut x = tape.add_scalar(input, -INPUT_CENTER);
        let mut stage_outputs = Vec::with_capacity(self.config.backbone.stages.len());
        for (s, stage) in self.config.backbone.stages.iter().enumerate() {
            for b in 0..stage.blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let (w, bias) = (take(), take());
                let y = tape.conv2d(x, w, bias, stride, 1)?;
                let y = tape.relu(y);
                x = if self.config.backbone.residual && b > 0 { tape.add(y, x)? } else { y };
            }
            stage_outputs.push(x);
        }

        let pooled = tape.global_avg_pool(x)?;
        let (ww, wb) = (take(), take());
        let weather_logits = tape.linear(pooled, ww, wb)?;
        let (lw, lb) = (take(), take());
        let light_logits = tape.linear(pooled, lw, lb)?;

        let predicted_loss = match &self.config.loss_pred {
            Some(_) => {
                let mut embeddings = Vec::with_capacity(self.config.backbone.taps.len());
                for &t in &self.config.backbone.taps {
                    let g = tape.global_avg_pool(stage_outputs[t])?;
                    let (w, b) = (take(), take());
                    let e = tape.linear(g, w, b)?;
                    embeddings.push(tape.relu(e));
                }
                let joined = tape.concat(&embeddings, 1)?;
                let (w, b) = (take(), take());
                let out = tape.linear(joined, w, b)?;
                tape.reshape(out, [n])?
            }
            None => tape.constant(Tensor::zeros([n])?),
        };

        Ok(ForwardVars {
            weather_logits,
            light_logits,
            predicted_loss,
            stage_outputs,
            params,
        })
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = self.config.backbone.input_side;
        match input.shape() {
            &[_, 1, h, w] if h == s && w == s => {}
            other => return Err(shape_err!("model expects input [N,1,{s},{s}], got {:?}", other)),
        }
        if input.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("input pixels must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Inference on a `[N,1,S,S]` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let frozen = vec![false; self.params.len()];
        let vars = self.forward_on(&mut tape, input, &frozen)?;
        Ok(ModelOutput {
            weather_logits: rows3(tape.value(vars.weather_logits)),
            light_logits: rows3(tape.value(vars.light_logits)),
            predicted_loss: tape.value(vars.predicted_loss).data().to_vec(),
        })
    }

    /// Inference over many images in chunks of `batch_size`.
    pub fn predict(&self, images: &[&[f32]], batch_size: usize) -> Result<ModelOutput> {
        let side = self.config.backbone.input_side;
        let mut out = ModelOutput::empty();
        for chunk in images.chunks(batch_size.max(1)) {
            out.extend(self.forward(&stack_images(chunk, side)?)?);
        }
        Ok(out)
    }
}

/// Stacks same-size square images into `[N,1,S,S]`.
pub fn stack_images(images: &[&[f32]], side: usize) -> Result<Tensor> {
    let plane = side * side;
    let mut data = Vec::with_capacity(images.len() * plane);
    for img in images {
        if img.len() != plane {
            return Err(shape_err!("image has {} pixels, expected {side}x{side}", img.len()));
        }
        data.extend_from_slice(img);
    }
    Tensor::new([images.len(), 1, side, side], data)
}

fn rows3(t: &Tensor) -> Vec<[f32; 3]> {
    t.data()
        .chunks_exact(3)
        .map(|r| [r[0], r[1], r[2]])
        .collect()
}

fn build_layout(config: &ModelConfig) -> Vec<ParamInfo> {
    let b = &config.backbone;
    let mut layout = Vec::new();
    let mut push = |name: String, unit: Unit, shape: Vec<usize>| layout.push(ParamInfo { name, unit, shape });
    let mut c_in = 1;
    for (s, stage) in b.stages.iter().enumerate() {
        for blk in 0..stage.blocks {
            let unit = Unit::Stage(s);
            push(format!("stage{s}.block{blk}.weight"), unit, vec![stage.channels, c_in, 3, 3]);
            push(format!("stage{s}.block{blk}.bias"), unit, vec![stage.channels]);
            c_in = stage.channels;
        }
    }
    push("weather_head.weight".into(), Unit::Heads, vec![c_in, NUM_WEATHER]);
    push("weather_head.bias".into(), Unit::Heads, vec![NUM_WEATHER]);
    push("light_head.weight".into(), Unit::Heads, vec![c_in, NUM_LIGHT]);
    push("light_head.bias".into(), Unit::Heads, vec![NUM_LIGHT]);
    if let Some(lp) = &config.loss_pred {
        let d = lp.embed_dim;
        for &t in &b.taps {
            push(format!("loss_pred.tap{t}.weight"), Unit::LossPred, vec![b.stages[t].channels, d]);
            push(format!("loss_pred.tap{t}.bias"), Unit::LossPred, vec![d]);
        }
        push("loss_pred.out.weight".into(), Unit::LossPred, vec![b.taps.len() * d, 1]);
        push("loss_pred.out.bias".into(), Unit::LossPred, vec![1]);
    }
    layout
}

fn init_param(info: &ParamInfo, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if info.name.ends_with(".bias") {
        return Tensor::zeros(info.shape.clone());
    }
    // Conv weights are [out, in, kh, kw]; linear weights are [in, out].
    let fan_in: usize = if info.shape.len() == 4 {
        info.shape[1..].iter().product()
    } else {
        info.shape[0]
    };
    // He-uniform ahead of a relu, LeCun-uniform for output layers.
    let feeds_relu = info.shape.len() == 4 || info.name.contains(".tap");
    let gain = if feeds_relu { 6.0 } else { 3.0 };
    let bound = (gain / fan_in as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-bound, bound);
    let numel = info.shape.iter().product();
    Tensor::new(info.shape.clone(), (0..numel).map(|_| dist.sample(rng)).collect())
}
