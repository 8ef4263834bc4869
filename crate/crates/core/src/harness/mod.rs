//! Fine-tuning experiments on synthetic tasks: data generation, toy models,
//! training runs, ablation grids and gradient checks.

pub mod ablation;
pub mod finetune;
pub mod gradcheck;
pub mod model;
pub mod task;

use thiserror::Error;

use crate::adapter::AdapterError;
use crate::io::FormatError;
use crate::linalg::LinalgError;
use crate::optim::OptimError;

pub use ablation::{ablate, AblationCell, AblationReport, AblationSpec};
pub use finetune::{
    finetune, pretrain, FinetuneConfig, FinetuneOutcome, Method, MethodKind, ModelSpec, Pretrained,
    RankChoice, RunMetrics, ScalingMode, TrainConfig,
};
pub use gradcheck::{gradcheck_suite, Corruption, GradcheckCase, GradcheckReport};
pub use model::{Activation, LossKind, ToyModel};
pub use task::{Dataset, SyntheticTask, Targets, TaskKind, TaskSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} diverged")]
    Divergence(String),
    #[error(
        "tensors outside the trainable set changed: mutated {mutated:?}, declared {declared:?}"
    )]
    IsolationViolated {
        mutated: Vec<String>,
        declared: Vec<String>,
    },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Format(#[from] FormatError),
}
