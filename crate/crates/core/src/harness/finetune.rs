//! Pre-training and fine-tuning runs.
//!
//! A fine-tuning method decides, per layer, what is trainable: the dense
//! weight and bias, a LoLDU adapter's `(z_r, σ)`, or a LoRA pair `(B, A)`.
//! Every run snapshots checksums of all tensors before and after training and
//! records whether exactly the declared trainable set changed.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{backward, evaluate, forward, loss_and_grad, EvalResult, LayerParams, ToyModel};
use super::task::{derive_seed, rng_for, stream, Dataset, SyntheticTask, TaskSpec};
use super::HarnessError;
use crate::adapter::{InitKind, InitMethod, LolduAdapter, LoraAdapter};
use crate::checksum::checksum_f64s;
use crate::linalg::{self, DenseMatrix};
use crate::optim::{self, LrSchedule, OptimState, Optimizer, OptimizerKind, ProjectionSpec};

/// Adapter rank, possibly relative to the layer's full rank `k = min(m, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RankRepr", into = "RankRepr")]
pub enum RankChoice {
    Fixed(usize),
    Full,
    /// `max(1, ⌊k / d⌋)`.
    FullDiv(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RankRepr {
    Int(usize),
    Str(String),
}

impl TryFrom<RankRepr> for RankChoice {
    type Error = String;

    fn try_from(r: RankRepr) -> Result<Self, String> {
        match r {
            RankRepr::Int(v) => Ok(RankChoice::Fixed(v)),
            RankRepr::Str(s) => s.parse(),
        }
    }
}

impl From<RankChoice> for RankRepr {
    fn from(r: RankChoice) -> Self {
        match r {
            RankChoice::Fixed(v) => RankRepr::Int(v),
            other => RankRepr::Str(other.to_string()),
        }
    }
}

impl RankChoice {
    pub fn resolve(self, k: usize) -> usize {
        match self {
            RankChoice::Fixed(r) => r,
            RankChoice::Full => k,
            RankChoice::FullDiv(d) => (k / d).max(1),
        }
    }
}

impl fmt::Display for RankChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankChoice::Fixed(r) => write!(f, "{r}"),
            RankChoice::Full => f.write_str("full"),
            RankChoice::FullDiv(d) => write!(f, "full/{d}"),
        }
    }
}

impl FromStr for RankChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "full" {
            return Ok(RankChoice::Full);
        }
        if let Some(d) = s.strip_prefix("full/") {
            return match d.parse::<usize>() {
                Ok(d) if d >= 1 => Ok(RankChoice::FullDiv(d)),
                _ => Err(format!("bad rank divisor in {s:?}")),
            };
        }
        s.parse::<usize>().map(RankChoice::Fixed).map_err(|_| {
            format!("rank must be a positive integer, \"full\" or \"full/N\", got {s:?}")
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// `σ` is trained alongside `z_r`.
    Trainable,
    /// `σ` stays at its initial value `α/r`.
    Frozen,
}

impl ScalingMode {
    pub fn name(self) -> &'static str {
        match self {
            ScalingMode::Trainable => "trainable",
            ScalingMode::Frozen => "frozen",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    FullFt,
    LinearProbe,
    Lora,
    Loldu,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::FullFt => "full_ft",
            MethodKind::LinearProbe => "linear_probe",
            MethodKind::Lora => "lora",
            MethodKind::Loldu => "loldu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    FullFt,
    LinearProbe,
    Lora {
        rank: RankChoice,
        /// Defaults to the resolved rank.
        alpha: Option<f64>,
    },
    Loldu {
        rank: RankChoice,
        /// Defaults to the resolved rank, giving `σ = 1` at init.
        alpha: Option<f64>,
        init: InitKind,
        scaling: ScalingMode,
    },
}

impl Method {
    pub fn kind(&self) -> MethodKind {
        match self {
            Method::FullFt => MethodKind::FullFt,
            Method::LinearProbe => MethodKind::LinearProbe,
            Method::Lora { .. } => MethodKind::Lora,
            Method::Loldu { .. } => MethodKind::Loldu,
        }
    }

    pub fn loldu(rank: RankChoice, init: InitKind) -> Self {
        Method::Loldu {
            rank,
            alpha: None,
            init,
            scaling: ScalingMode::Trainable,
        }
    }

    pub fn rank(&self) -> Option<RankChoice> {
        match self {
            Method::Lora { rank, .. } | Method::Loldu { rank, .. } => Some(*rank),
            _ => None,
        }
    }

    /// Short label, e.g. `loldu(r=full,init=regular_ldu,sigma=trainable)`.
    pub fn label(&self) -> String {
        match self {
            Method::FullFt | Method::LinearProbe => self.kind().name().to_string(),
            Method::Lora { rank, .. } => format!("lora(r={rank})"),
            Method::Loldu {
                rank,
                init,
                scaling,
                ..
            } => format!("loldu(r={rank},init={init},sigma={})", scaling.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    /// Student init: weights `N(0, gain²/fan_in)`.
    pub init_gain: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            init_gain: 1.0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden.len() > 3 {
            return Err("at most 4 layers (3 hidden) are supported".into());
        }
        if self.hidden.iter().any(|&h| h == 0 || h > 64) {
            return Err("hidden widths must be in 1..=64".into());
        }
        if self.init_gain.is_nan() || self.init_gain <= 0.0 {
            return Err("init_gain must be positive".into());
        }
        Ok(())
    }

    pub fn sizes(&self, task: &TaskSpec) -> Vec<usize> {
        let mut s = vec![task.d_in];
        s.extend(&self.hidden);
        s.push(task.d_out);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3e-3,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        Ok(())
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    /// Radius of the `‖z_r‖` ball; defaults to `10·max(‖z_r‖, √r)` per adapter.
    pub epsilon: Option<f64>,
    pub sigma_min: f64,
    /// Layers that receive an adapter; defaults to every layer but the head.
    pub adapt_layers: Option<Vec<usize>>,
    /// Whether LoRA/LoLDU runs also train the head layer densely.
    pub train_head: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            epsilon: None,
            sigma_min: optim::DEFAULT_SIGMA_MIN,
            adapt_layers: None,
            train_head: true,
        }
    }
}

/// Per-run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Mean minibatch loss, one entry per completed epoch.
    pub train_loss: Vec<f64>,
    /// Entry 0 is before any update; then one per completed epoch.
    pub eval_loss: Vec<f64>,
    pub eval_accuracy: Option<Vec<f64>>,
    pub trainable_params: usize,
    pub wall_clock_s: f64,
    pub diverged: bool,
    /// Checksum of the final merged model.
    pub merged_checksum: u64,
    /// LDU factorizations performed during the run.
    pub factorizations: u64,
    pub steps: u64,
    pub mutated: Vec<String>,
    pub declared_trainable: Vec<String>,
}

impl RunMetrics {
    pub fn final_eval_loss(&self) -> f64 {
        if self.diverged {
            return f64::NAN;
        }
        *self.eval_loss.last().unwrap_or(&f64::NAN)
    }

    pub fn final_eval_accuracy(&self) -> Option<f64> {
        if self.diverged {
            return Some(f64::NAN);
        }
        self.eval_accuracy.as_ref().and_then(|a| a.last().copied())
    }

    /// Higher is better: accuracy for classification, negated loss otherwise.
    /// Diverged runs score `-inf`.
    pub fn score(&self) -> f64 {
        if self.diverged {
            return f64::NEG_INFINITY;
        }
        match self.final_eval_accuracy() {
            Some(a) => a,
            None => -self.final_eval_loss(),
        }
    }

    /// Mutated tensors are a subset of the declared trainable set.
    pub fn isolation_holds(&self) -> bool {
        self.mutated
            .iter()
            .all(|m| self.declared_trainable.contains(m))
    }

    /// Mutated set equals the declared set exactly.
    pub fn isolation_exact(&self) -> bool {
        self.isolation_holds() && self.mutated.len() == self.declared_trainable.len()
    }
}

/// Result of a run: metrics, the merged model and any trained LoLDU adapters
/// keyed by layer index.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub metrics: RunMetrics,
    pub model: ToyModel,
    pub loldu_adapters: Vec<(usize, LolduAdapter)>,
}

enum LayerMode {
    Frozen,
    Dense {
        weight: Optimizer,
        bias: Optimizer,
    },
    Loldu {
        adapter: LolduAdapter,
        state: OptimState,
    },
    Lora {
        adapter: LoraAdapter,
        b: Optimizer,
        a: Optimizer,
    },
}

impl LayerMode {
    fn trains(&self) -> bool {
        !matches!(self, LayerMode::Frozen)
    }
}

struct TrainingState {
    model: ToyModel,
    modes: Vec<LayerMode>,
}

impl TrainingState {
    fn effective_weights(&self) -> Vec<Cow<'_, DenseMatrix>> {
        self.model
            .layers
            .iter()
            .zip(&self.modes)
            .map(|(layer, mode)| match mode {
                LayerMode::Loldu { adapter, .. } => Cow::Owned(adapter.merged_weight()),
                LayerMode::Lora { adapter, .. } => Cow::Owned(adapter.merged_weight()),
                _ => Cow::Borrowed(&layer.weight),
            })
            .collect()
    }

    fn evaluate(&self, data: &Dataset) -> EvalResult {
        let weights = self.effective_weights();
        let params = self.layer_params(&weights);
        evaluate(&params, self.model.activation, self.model.loss, data)
    }

    fn layer_params<'a>(&'a self, weights: &'a [Cow<'a, DenseMatrix>]) -> Vec<LayerParams<'a>> {
        weights
            .iter()
            .zip(&self.model.layers)
            .map(|(w, l)| LayerParams {
                weight: w.as_ref(),
                bias: &l.bias,
            })
            .collect()
    }

    /// Named checksums of every tensor involved in the run.
    fn checksums(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for (i, (layer, mode)) in self.model.layers.iter().zip(&self.modes).enumerate() {
            out.insert(
                format!("layer{i}.weight"),
                checksum_f64s([layer.weight.as_slice()]),
            );
            out.insert(
                format!("layer{i}.bias"),
                checksum_f64s([layer.bias.as_slice()]),
            );
            match mode {
                LayerMode::Loldu { adapter, .. } => {
                    out.insert(format!("layer{i}.loldu.frozen"), adapter.frozen_checksum());
                    out.insert(format!("layer{i}.loldu.z"), checksum_f64s([adapter.z()]));
                    out.insert(
                        format!("layer{i}.loldu.sigma"),
                        checksum_f64s([&[adapter.sigma()][..]]),
                    );
                }
                LayerMode::Lora { adapter, .. } => {
                    out.insert(format!("layer{i}.lora.frozen"), adapter.frozen_checksum());
                    out.insert(
                        format!("layer{i}.lora.b"),
                        checksum_f64s([adapter.b.as_slice()]),
                    );
                    out.insert(
                        format!("layer{i}.lora.a"),
                        checksum_f64s([adapter.a.as_slice()]),
                    );
                }
                _ => {}
            }
        }
        out
    }

    fn declared_trainable(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, mode) in self.modes.iter().enumerate() {
            match mode {
                LayerMode::Frozen => {}
                LayerMode::Dense { .. } => {
                    out.push(format!("layer{i}.weight"));
                    out.push(format!("layer{i}.bias"));
                }
                LayerMode::Loldu { state, .. } => {
                    out.push(format!("layer{i}.loldu.z"));
                    if state.train_sigma {
                        out.push(format!("layer{i}.loldu.sigma"));
                    }
                }
                LayerMode::Lora { .. } => {
                    out.push(format!("layer{i}.lora.b"));
                    out.push(format!("layer{i}.lora.a"));
                }
            }
        }
        out.sort();
        out
    }

    fn trainable_params(&self) -> usize {
        self.modes
            .iter()
            .zip(&self.model.layers)
            .map(|(mode, layer)| match mode {
                LayerMode::Frozen => 0,
                LayerMode::Dense { .. } => layer.weight.as_slice().len() + layer.bias.len(),
                LayerMode::Loldu { adapter, state } => {
                    adapter.trainable_param_count() - usize::from(!state.train_sigma)
                }
                LayerMode::Lora { adapter, .. } => adapter.trainable_param_count(),
            })
            .sum()
    }

    /// One minibatch update. Returns the pre-update loss, or `None` when the
    /// loss or a gradient is non-finite.
    fn step(&mut self, batch: &Dataset) -> Result<Option<f64>, HarnessError> {
        let needs: Vec<bool> = self.modes.iter().map(LayerMode::trains).collect();
        let (loss, grads) = {
            let weights = self.effective_weights();
            let params = self.layer_params(&weights);
            let cache = forward(&params, self.model.activation, &batch.inputs);
            let (loss, d_out) = loss_and_grad(self.model.loss, cache.output(), &batch.targets);
            if !loss.is_finite() {
                return Ok(None);
            }
            (
                loss,
                backward(&params, self.model.activation, &cache, d_out, &needs),
            )
        };
        for ((layer, mode), grad) in self.model.layers.iter_mut().zip(&mut self.modes).zip(grads) {
            let Some(grad) = grad else { continue };
            let result = match mode {
                LayerMode::Frozen => Ok(()),
                LayerMode::Dense { weight, bias } => weight
                    .apply(layer.weight.as_mut_slice(), grad.weight.as_slice())
                    .and_then(|_| bias.apply(&mut layer.bias, &grad.bias)),
                LayerMode::Loldu { adapter, state } => {
                    let g = adapter.gradients_from_weight_grad(&grad.weight)?;
                    optim::step(adapter, &g, state)
                }
                LayerMode::Lora { adapter, b, a } => {
                    let g = adapter.gradients_from_weight_grad(&grad.weight)?;
                    b.apply(adapter.b.as_mut_slice(), g.b.as_slice())
                        .and_then(|_| a.apply(adapter.a.as_mut_slice(), g.a.as_slice()))
                }
            };
            match result {
                Ok(()) => {}
                Err(
                    optim::OptimError::NonFiniteGradient { .. }
                    | optim::OptimError::NonFiniteIterate { .. },
                ) => return Ok(None),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Some(loss))
    }

    fn into_merged(self) -> (ToyModel, Vec<(usize, LolduAdapter)>) {
        let mut model = self.model;
        let mut adapters = Vec::new();
        for (i, mode) in self.modes.into_iter().enumerate() {
            match mode {
                LayerMode::Loldu { adapter, .. } => {
                    model.layers[i].weight = adapter.merged_weight();
                    adapters.push((i, adapter));
                }
                LayerMode::Lora { adapter, .. } => model.layers[i].weight = adapter.merged_weight(),
                _ => {}
            }
        }
        (model, adapters)
    }
}

fn dense(cfg: &TrainConfig, len: usize) -> Result<Optimizer, HarnessError> {
    Ok(Optimizer::new(cfg.optimizer, cfg.schedule(), len)?)
}

fn build_modes(
    model: &ToyModel,
    method: &Method,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<LayerMode>, HarnessError> {
    let head = model.head_index();
    let adapted: Vec<usize> = match &cfg.adapt_layers {
        Some(layers) => layers.clone(),
        None => (0..head).collect(),
    };
    if let Some(&bad) = adapted.iter().find(|&&l| l >= model.layers.len()) {
        return Err(HarnessError::InvalidConfig(format!(
            "adapt layer {bad} does not exist"
        )));
    }
    let method_seed = derive_seed(seed, stream::METHOD_INIT);
    let mut modes = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let dense_mode = || -> Result<LayerMode, HarnessError> {
            Ok(LayerMode::Dense {
                weight: dense(&cfg.train, layer.weight.as_slice().len())?,
                bias: dense(&cfg.train, layer.bias.len())?,
            })
        };
        let layer_seed = derive_seed(method_seed, i as u64);
        let k = layer.weight.rows().min(layer.weight.cols());
        let mode = match method {
            Method::FullFt => dense_mode()?,
            Method::LinearProbe => {
                if i == head {
                    dense_mode()?
                } else {
                    LayerMode::Frozen
                }
            }
            Method::Lora { rank, alpha } if adapted.contains(&i) => {
                let r = rank.resolve(k);
                let adapter =
                    LoraAdapter::new(&layer.weight, r, alpha.unwrap_or(r as f64), layer_seed)?;
                LayerMode::Lora {
                    b: dense(&cfg.train, adapter.b.as_slice().len())?,
                    a: dense(&cfg.train, adapter.a.as_slice().len())?,
                    adapter,
                }
            }
            Method::Loldu {
                rank,
                alpha,
                init,
                scaling,
            } if adapted.contains(&i) => {
                let r = rank.resolve(k);
                let alpha = alpha.unwrap_or(r as f64);
                if alpha > r as f64 {
                    log::warn!(
                        "layer {i}: alpha {alpha} > rank {r} puts sigma above 1; it is clamped"
                    );
                }
                let mut adapter =
                    LolduAdapter::new(&layer.weight, r, alpha, InitMethod::new(*init, layer_seed))?;
                let projection = match cfg.epsilon {
                    Some(eps) => ProjectionSpec::new(eps, cfg.sigma_min)?,
                    None => ProjectionSpec::for_adapter(&adapter, cfg.sigma_min)?,
                };
                let train_sigma = *scaling == ScalingMode::Trainable;
                if !train_sigma {
                    adapter.set_sigma(optim::project_sigma(adapter.sigma(), &projection));
                }
                let state = OptimState::new(
                    cfg.train.optimizer,
                    cfg.train.schedule(),
                    r,
                    projection,
                    train_sigma,
                )?;
                LayerMode::Loldu { adapter, state }
            }
            Method::Lora { .. } | Method::Loldu { .. } => {
                if i == head && cfg.train_head {
                    dense_mode()?
                } else {
                    LayerMode::Frozen
                }
            }
        };
        modes.push(mode);
    }
    Ok(modes)
}

/// Fine-tunes a copy of `model` on `train` with `method`, evaluating on
/// `eval` before training and after every epoch.
pub fn finetune(
    model: &ToyModel,
    method: &Method,
    train: &Dataset,
    eval: &Dataset,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome, HarnessError> {
    cfg.train.validate().map_err(HarnessError::InvalidConfig)?;
    let started = Instant::now();
    let factorizations_before = linalg::factorization_count();

    let modes = build_modes(model, method, cfg, seed)?;
    let adapted_loldu = modes
        .iter()
        .filter(|m| matches!(m, LayerMode::Loldu { .. }))
        .count() as u64;
    let mut state = TrainingState {
        model: model.clone(),
        modes,
    };
    let before = state.checksums();
    let declared_trainable = state.declared_trainable();
    let trainable_params = state.trainable_params();

    let first = state.evaluate(eval);
    let mut eval_loss = vec![first.loss];
    let mut eval_accuracy = first.accuracy.map(|a| vec![a]);
    let mut train_loss = Vec::with_capacity(cfg.train.epochs);
    let mut diverged = !first.loss.is_finite();

    let mut shuffle = rng_for(seed, stream::FINETUNE_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0u64;
    'epochs: for _ in 0..cfg.train.epochs {
        if diverged {
            break;
        }
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch = train.select(chunk);
            match state.step(&batch)? {
                Some(loss) => {
                    total += loss;
                    batches += 1;
                    steps += 1;
                }
                None => {
                    diverged = true;
                    break 'epochs;
                }
            }
        }
        train_loss.push(total / batches as f64);
        let ev = state.evaluate(eval);
        if !ev.loss.is_finite() {
            diverged = true;
        }
        eval_loss.push(ev.loss);
        if let (Some(acc), Some(v)) = (eval_accuracy.as_mut(), ev.accuracy) {
            acc.push(v);
        }
    }

    let after = state.checksums();
    let mutated: Vec<String> = after
        .iter()
        .filter(|(k, v)| before.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    let (merged, loldu_adapters) = state.into_merged();
    let factorizations = linalg::factorization_count() - factorizations_before;
    assert_eq!(
        factorizations, adapted_loldu,
        "exactly one LDU factorization per adapted matrix"
    );

    let metrics = RunMetrics {
        train_loss,
        eval_loss,
        eval_accuracy,
        trainable_params,
        wall_clock_s: started.elapsed().as_secs_f64(),
        diverged,
        merged_checksum: merged.checksum(),
        factorizations,
        steps,
        mutated,
        declared_trainable,
    };
    if !metrics.isolation_holds() {
        return Err(HarnessError::IsolationViolated {
            mutated: metrics.mutated.clone(),
            declared: metrics.declared_trainable.clone(),
        });
    }
    Ok(FinetuneOutcome {
        metrics,
        model: merged,
        loldu_adapters,
    })
}

/// A model trained from scratch on the pre-training split.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: ToyModel,
    pub eval: EvalResult,
    pub metrics: RunMetrics,
}

/// Trains a fresh student on the task's pre-training split.
pub fn pretrain(
    task: &SyntheticTask,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<Pretrained, HarnessError> {
    spec.validate().map_err(HarnessError::InvalidConfig)?;
    let sizes = spec.sizes(&task.spec);
    let mut rng = rng_for(task.seed, stream::STUDENT_INIT);
    let init = ToyModel::random(
        &sizes,
        task.spec.activation(),
        task.spec.loss(),
        spec.init_gain,
        false,
        &mut rng,
    );
    let ft_cfg = FinetuneConfig {
        train: cfg.clone(),
        ..FinetuneConfig::default()
    };
    let shuffle_seed = derive_seed(task.seed, stream::PRETRAIN_SHUFFLE);
    let out = finetune(
        &init,
        &Method::FullFt,
        &task.pretrain_train,
        &task.pretrain_eval,
        &ft_cfg,
        shuffle_seed,
    )?;
    if out.metrics.diverged {
        return Err(HarnessError::Divergence("pre-training".into()));
    }
    let eval = out.model.evaluate(&task.pretrain_eval);
    Ok(Pretrained {
        model: out.model,
        eval,
        metrics: out.metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::task::{Targets, TaskKind};

    fn small_task(seed: u64) -> SyntheticTask {
        let spec = TaskSpec {
            d_in: 8,
            d_out: 3,
            teacher_hidden: vec![12],
            n_train: 256,
            n_eval: 128,
            shift: 0.5,
            ..TaskSpec::default()
        };
        SyntheticTask::generate(&spec, seed)
    }

    fn small_model() -> ModelSpec {
        ModelSpec {
            hidden: vec![12],
            init_gain: 1.0,
        }
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rank_choice_parsing() {
        assert_eq!("full".parse::<RankChoice>().unwrap(), RankChoice::Full);
        assert_eq!(
            "full/3".parse::<RankChoice>().unwrap(),
            RankChoice::FullDiv(3)
        );
        assert_eq!("7".parse::<RankChoice>().unwrap(), RankChoice::Fixed(7));
        assert!("full/0".parse::<RankChoice>().is_err());
        assert!("many".parse::<RankChoice>().is_err());
        assert_eq!(RankChoice::FullDiv(3).resolve(32), 10);
        assert_eq!(RankChoice::FullDiv(3).resolve(2), 1);
        assert_eq!(RankChoice::Full.resolve(16), 16);
    }

    #[test]
    fn zero_epoch_pretrain_is_initialization() {
        let task = small_task(1);
        let p = pretrain(&task, &small_model(), &quick(0)).unwrap();
        let mut rng = rng_for(1, stream::STUDENT_INIT);
        let init = ToyModel::random(
            &[8, 12, 3],
            task.spec.activation(),
            task.spec.loss(),
            1.0,
            false,
            &mut rng,
        );
        assert_eq!(p.model, init);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let task = small_task(2);
        let a = pretrain(&task, &small_model(), &quick(2)).unwrap();
        let b = pretrain(&task, &small_model(), &quick(2)).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert!(a.metrics.eval_loss.last().unwrap() < &a.metrics.eval_loss[0]);
    }

    #[test]
    fn linear_probe_touches_only_the_head() {
        let task = small_task(3);
        let p = pretrain(&task, &small_model(), &quick(2)).unwrap();
        let cfg = FinetuneConfig {
            train: quick(1),
            ..FinetuneConfig::default()
        };
        let out = finetune(
            &p.model,
            &Method::LinearProbe,
            &task.finetune_train,
            &task.finetune_eval,
            &cfg,
            0,
        )
        .unwrap();
        assert_eq!(
            out.metrics.mutated,
            vec!["layer1.bias".to_string(), "layer1.weight".to_string()]
        );
        assert!(out.metrics.isolation_exact());
        assert_eq!(out.model.layers[0], p.model.layers[0]);
        assert_eq!(out.metrics.factorizations, 0);
    }

    #[test]
    fn loldu_regular_init_preserves_the_function() {
        let task = small_task(4);
        let p = pretrain(&task, &small_model(), &quick(2)).unwrap();
        let cfg = FinetuneConfig {
            train: quick(2),
            ..FinetuneConfig::default()
        };
        let method = Method::loldu(RankChoice::Full, InitKind::RegularLdu);
        let out = finetune(
            &p.model,
            &method,
            &task.finetune_train,
            &task.finetune_eval,
            &cfg,
            0,
        )
        .unwrap();
        let base = p.model.evaluate(&task.finetune_eval).loss;
        assert!((out.metrics.eval_loss[0] - base).abs() <= 1e-8 * base.max(1.0));
        assert_eq!(out.metrics.factorizations, 1);
        // sigma starts at its upper bound 1 and stays clamped there.
        assert!(out.metrics.isolation_holds());
        assert_eq!(
            out.metrics.mutated,
            ["layer0.loldu.z", "layer1.bias", "layer1.weight"]
        );
        assert_eq!(out.loldu_adapters[0].1.sigma(), 1.0);
        // Head (12 x 3 + 3) plus r + 1 for the single adapted 12 x 8 layer.
        assert_eq!(out.metrics.trainable_params, 39 + 9);
        assert_eq!(out.loldu_adapters.len(), 1);
    }

    #[test]
    fn frozen_scaling_never_moves_sigma() {
        let task = small_task(5);
        let p = pretrain(&task, &small_model(), &quick(1)).unwrap();
        let cfg = FinetuneConfig {
            train: quick(1),
            ..FinetuneConfig::default()
        };
        let method = Method::Loldu {
            rank: RankChoice::Fixed(4),
            alpha: None,
            init: InitKind::UniformSym1,
            scaling: ScalingMode::Frozen,
        };
        let out = finetune(
            &p.model,
            &method,
            &task.finetune_train,
            &task.finetune_eval,
            &cfg,
            0,
        )
        .unwrap();
        assert!(!out.metrics.mutated.iter().any(|m| m.ends_with("sigma")));
        assert_eq!(out.loldu_adapters[0].1.sigma(), 1.0);
        assert!(out.metrics.isolation_exact());
    }

    #[test]
    fn lora_and_full_ft_isolation() {
        let task = small_task(6);
        let p = pretrain(&task, &small_model(), &quick(1)).unwrap();
        let cfg = FinetuneConfig {
            train: quick(1),
            ..FinetuneConfig::default()
        };
        for method in [
            Method::FullFt,
            Method::Lora {
                rank: RankChoice::Fixed(2),
                alpha: None,
            },
        ] {
            let out = finetune(
                &p.model,
                &method,
                &task.finetune_train,
                &task.finetune_eval,
                &cfg,
                0,
            )
            .unwrap();
            assert!(
                out.metrics.isolation_exact(),
                "{}: {:?}",
                method.label(),
                out.metrics.mutated
            );
        }
    }

    #[test]
    fn huge_learning_rate_is_flagged_not_fatal() {
        let task = small_task(7);
        let p = pretrain(&task, &small_model(), &quick(1)).unwrap();
        let cfg = FinetuneConfig {
            train: TrainConfig {
                epochs: 3,
                lr: 1e200,
                optimizer: OptimizerKind::Sgd,
                ..TrainConfig::default()
            },
            ..FinetuneConfig::default()
        };
        let out = finetune(
            &p.model,
            &Method::FullFt,
            &task.finetune_train,
            &task.finetune_eval,
            &cfg,
            0,
        )
        .unwrap();
        assert!(out.metrics.diverged);
        assert!(out.metrics.final_eval_loss().is_nan());
        assert_eq!(out.metrics.score(), f64::NEG_INFINITY);
    }

    #[test]
    fn classification_reports_accuracy() {
        let spec = TaskSpec {
            kind: TaskKind::ClusterClassification,
            d_in: 6,
            d_out: 3,
            n_train: 300,
            n_eval: 150,
            shift: 0.6,
            ..TaskSpec::default()
        };
        let task = SyntheticTask::generate(&spec, 8);
        assert!(matches!(task.finetune_train.targets, Targets::Labels(_)));
        let p = pretrain(&task, &small_model(), &quick(5)).unwrap();
        assert!(p.eval.accuracy.unwrap() > 0.6);
        let cfg = FinetuneConfig {
            train: quick(2),
            ..FinetuneConfig::default()
        };
        let out = finetune(
            &p.model,
            &Method::loldu(RankChoice::Full, InitKind::RegularLdu),
            &task.finetune_train,
            &task.finetune_eval,
            &cfg,
            1,
        )
        .unwrap();
        assert_eq!(out.metrics.eval_accuracy.as_ref().unwrap().len(), 3);
    }
}
