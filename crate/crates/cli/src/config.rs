//! Run configuration files (TOML).
//!
//! Every section and key is optional; omitted keys take the defaults below.
//! Unknown keys are rejected.
//!
//! ```toml
//! seed = 0                 # LOLDU_SEED overrides
//! output_dir = "runs/demo" # --output overrides
//!
//! [task]                   # synthetic task
//! kind = "teacher_regression"
//! d_in = 16
//! d_out = 4
//!
//! [model]
//! hidden = [32, 32]
//!
//! [pretrain]               # same keys as [train] minus the adapter keys
//! epochs = 10
//!
//! [method]
//! kind = "loldu"           # full_ft | linear_probe | lora | loldu
//! rank = "full"            # integer, "full" or "full/N"
//! init = "regular_ldu"
//! scaling = "trainable"    # or "frozen"
//! # alpha defaults to the rank
//!
//! [train]
//! epochs = 10
//! lr = 3e-3
//! batch_size = 32
//! optimizer = "adam"       # or "sgd"
//! sigma_min = 1e-6
//! # epsilon defaults to 10·max(‖z_r‖, √r) per adapter
//!
//! [grid]                   # ablate only
//! methods = ["loldu"]
//! ranks = [1, 4, "full"]
//! inits = ["regular_ldu"]
//! scaling = ["trainable", "frozen"]
//! lrs = [3e-3]
//! seeds = [0, 1, 2]        # defaults to [seed]
//! ```

use std::path::PathBuf;

use loldu_core::adapter::InitKind;
use loldu_core::harness::{
    AblationSpec, FinetuneConfig, Method, MethodKind, ModelSpec, RankChoice, ScalingMode, TaskSpec,
    TrainConfig,
};
use loldu_core::optim::{OptimizerKind, DEFAULT_SIGMA_MIN};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub pretrain: TrainConfig,
    pub method: Method,
    pub train: TrainSection,
    pub grid: Option<GridSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            task: TaskSpec::default(),
            model: ModelSpec::default(),
            pretrain: TrainConfig::default(),
            method: Method::loldu(RankChoice::Full, InitKind::RegularLdu),
            train: TrainSection::default(),
            grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub warmup_steps: u64,
    pub epsilon: Option<f64>,
    pub sigma_min: f64,
    pub adapt_layers: Option<Vec<usize>>,
    pub train_head: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            epochs: train.epochs,
            lr: train.lr,
            batch_size: train.batch_size,
            optimizer: train.optimizer,
            warmup_steps: train.warmup_steps,
            epsilon: None,
            sigma_min: DEFAULT_SIGMA_MIN,
            adapt_layers: None,
            train_head: true,
        }
    }
}

impl TrainSection {
    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            train: TrainConfig {
                epochs: self.epochs,
                lr: self.lr,
                batch_size: self.batch_size,
                optimizer: self.optimizer,
                warmup_steps: self.warmup_steps,
            },
            epsilon: self.epsilon,
            sigma_min: self.sigma_min,
            adapt_layers: self.adapt_layers.clone(),
            train_head: self.train_head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub methods: Vec<MethodKind>,
    pub ranks: Vec<RankChoice>,
    pub inits: Vec<InitKind>,
    pub scaling: Vec<ScalingMode>,
    pub lrs: Vec<f64>,
    pub seeds: Option<Vec<u64>>,
    pub alpha: Option<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            methods: vec![MethodKind::Loldu],
            ranks: vec![RankChoice::Full],
            inits: vec![InitKind::RegularLdu],
            scaling: vec![ScalingMode::Trainable],
            lrs: vec![TrainConfig::default().lr],
            seeds: None,
            alpha: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> Result<String, String> {
        toml::to_string(self).map_err(|e| e.to_string())
    }

    /// Seeds are stored as TOML integers, so they must fit in an `i64`.
    pub fn validate(&self) -> Result<(), String> {
        let seeds = self
            .grid
            .as_ref()
            .and_then(|g| g.seeds.clone())
            .unwrap_or_default();
        if let Some(s) = std::iter::once(self.seed)
            .chain(seeds)
            .find(|&s| s > i64::MAX as u64)
        {
            return Err(format!("seed {s} does not fit in a signed 64-bit integer"));
        }
        self.task.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.finetune_config().train.validate()?;
        if let Method::Loldu { alpha: Some(a), .. } | Method::Lora { alpha: Some(a), .. } =
            self.method
        {
            if !(a > 0.0 && a.is_finite()) {
                return Err(format!("alpha must be positive, got {a}"));
            }
        }
        Ok(())
    }

    /// The grid that `ablate` runs.
    pub fn ablation_spec(&self) -> AblationSpec {
        let grid = self.grid.clone().unwrap_or_default();
        AblationSpec {
            task: self.task.clone(),
            model: self.model.clone(),
            pretrain: self.pretrain.clone(),
            finetune: self.train.finetune_config(),
            methods: grid.methods,
            ranks: grid.ranks,
            inits: grid.inits,
            scaling: grid.scaling,
            lrs: grid.lrs,
            seeds: grid.seeds.unwrap_or_else(|| vec![self.seed]),
            alpha: grid.alpha,
        }
    }

    /// Applies a `LOLDU_SEED` value: replaces `seed` and any grid seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(grid) = self.grid.as_mut() {
            grid.seeds = Some(vec![seed]);
        }
    }
}
