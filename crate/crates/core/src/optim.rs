//! Projected gradient descent over the adapter's `(z_r, σ)`.
//!
//! Feasible set: `‖z_r‖₂ ≤ ε` and `σ_min ≤ σ ≤ σ_max` (with `σ_max = 1`).
//! Each step moves along the raw gradient (SGD) or an Adam direction and then
//! projects back onto the feasible set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterGradients, LolduAdapter};
use crate::linalg::norm2;

pub const DEFAULT_SIGMA_MIN: f64 = 1e-6;
/// Default ball radius as a multiple of the initial `‖z_r‖`.
pub const DEFAULT_EPSILON_FACTOR: f64 = 10.0;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("update overflowed at step {step}")]
    NonFiniteIterate { step: u64 },
    #[error("gradient length {got} does not match parameter length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub epsilon: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl ProjectionSpec {
    pub fn new(epsilon: f64, sigma_min: f64) -> Result<Self> {
        let spec = Self {
            epsilon,
            sigma_min,
            sigma_max: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `ε = 10·max(‖z_r‖, √r)`. The `√r` floor keeps the ball non-degenerate
    /// for an all-zero start.
    pub fn for_adapter(adapter: &LolduAdapter, sigma_min: f64) -> Result<Self> {
        let floor = (adapter.rank() as f64).sqrt();
        Self::new(
            DEFAULT_EPSILON_FACTOR * norm2(adapter.z()).max(floor),
            sigma_min,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(OptimError::InvalidConfig(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max && self.sigma_max <= 1.0) {
            return Err(OptimError::InvalidConfig(format!(
                "need 0 < sigma_min < sigma_max <= 1, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    pub fn is_feasible(&self, z: &[f64], sigma: f64) -> bool {
        norm2(z) <= self.epsilon && (self.sigma_min..=self.sigma_max).contains(&sigma)
    }
}

/// Euclidean projection onto `{z : ‖z‖₂ ≤ ε}`.
pub fn project_z(z: &[f64], epsilon: f64) -> Vec<f64> {
    let norm = norm2(z);
    if norm <= epsilon {
        return z.to_vec();
    }
    let mut out: Vec<f64> = if norm.is_finite() {
        z.iter().map(|v| v * (epsilon / norm)).collect()
    } else {
        // The squared norm overflowed; normalize by the largest entry first.
        let peak = z.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let unit: Vec<f64> = z.iter().map(|v| v / peak).collect();
        let scale = epsilon / norm2(&unit);
        unit.iter().map(|v| v * scale).collect()
    };
    // Rounding can leave the rescaled vector a hair outside the ball.
    let mut shrink = 1.0 - f64::EPSILON;
    while norm2(&out) > epsilon {
        out.iter_mut().for_each(|v| *v *= shrink);
        shrink *= shrink;
    }
    out
}

/// Clamp onto `[σ_min, σ_max]`. The open lower bound `σ > 0` is realized as
/// the closed bound `σ_min`.
pub fn project_sigma(sigma: f64, spec: &ProjectionSpec) -> f64 {
    sigma.clamp(spec.sigma_min, spec.sigma_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Step-size schedule: constant after an optional linear warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr,
            warmup_steps: 0,
        }
    }

    /// Rate for the 1-based step `t`.
    pub fn at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 || t >= self.warmup_steps {
            self.lr
        } else {
            self.lr * t as f64 / self.warmup_steps as f64
        }
    }
}

/// Update rule over a flat parameter vector: SGD, or Adam with bias-corrected
/// moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    schedule: LrSchedule,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule, len: usize) -> Result<Self> {
        if !(schedule.lr > 0.0 && schedule.lr.is_finite()) {
            return Err(OptimError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                schedule.lr
            )));
        }
        let buf = if kind == OptimizerKind::Adam { len } else { 0 };
        Ok(Self {
            kind,
            schedule,
            step: 0,
            first: vec![0.0; buf],
            second: vec![0.0; buf],
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Returns the signed increment `-η_t·ĝ` for `grads`, advancing the step.
    pub fn increment(&mut self, grads: &[f64]) -> Result<Vec<f64>> {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient {
                step: self.step + 1,
            });
        }
        if self.kind == OptimizerKind::Adam && grads.len() != self.first.len() {
            return Err(OptimError::LengthMismatch {
                expected: self.first.len(),
                got: grads.len(),
            });
        }
        self.step += 1;
        let t = self.step;
        let lr = self.schedule.at(t);
        Ok(match self.kind {
            OptimizerKind::Sgd => grads.iter().map(|g| -lr * g).collect(),
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(t.min(i32::MAX as u64) as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(t.min(i32::MAX as u64) as i32);
                grads
                    .iter()
                    .zip(self.first.iter_mut().zip(self.second.iter_mut()))
                    .map(|(&g, (m, v))| {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        -lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS)
                    })
                    .collect()
            }
        })
    }

    /// Unconstrained in-place update.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(OptimError::LengthMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (p, d) in params.iter_mut().zip(self.increment(grads)?) {
            *p += d;
        }
        Ok(())
    }
}

/// Optimizer state for one adapter: moment buffers sized `r + 1` (the last
/// slot belongs to `σ`) plus the feasible set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    inner: Optimizer,
    pub projection: ProjectionSpec,
    /// When false, `σ` receives no gradient updates (it is still kept feasible).
    pub train_sigma: bool,
}

impl OptimState {
    pub fn new(
        kind: OptimizerKind,
        schedule: LrSchedule,
        rank: usize,
        projection: ProjectionSpec,
        train_sigma: bool,
    ) -> Result<Self> {
        projection.validate()?;
        Ok(Self {
            inner: Optimizer::new(kind, schedule, rank + 1)?,
            projection,
            train_sigma,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.inner.step_count()
    }
}

/// One projected step: `z ← Π_ε(z − η·ĝ_z)`, `σ ← Π_σ(σ − η·ĝ_σ)`.
pub fn step(
    adapter: &mut LolduAdapter,
    grads: &AdapterGradients,
    state: &mut OptimState,
) -> Result<()> {
    let r = adapter.rank();
    if grads.z.len() != r {
        return Err(OptimError::LengthMismatch {
            expected: r,
            got: grads.z.len(),
        });
    }
    let mut flat = Vec::with_capacity(r + 1);
    flat.extend_from_slice(&grads.z);
    flat.push(if state.train_sigma { grads.sigma } else { 0.0 });
    let inc = state.inner.increment(&flat)?;

    let spec = state.projection;
    let (z, sigma) = adapter.trainable_mut();
    let moved: Vec<f64> = z.iter().zip(&inc[..r]).map(|(v, d)| v + d).collect();
    let next_sigma = if state.train_sigma {
        *sigma + inc[r]
    } else {
        *sigma
    };
    if moved.iter().any(|v| !v.is_finite()) || !next_sigma.is_finite() {
        return Err(OptimError::NonFiniteIterate {
            step: state.step_count(),
        });
    }
    z.copy_from_slice(&project_z(&moved, spec.epsilon));
    *sigma = project_sigma(next_sigma, &spec);

    assert!(
        spec.is_feasible(adapter.z(), adapter.sigma()),
        "projected iterate left the feasible set"
    );
    Ok(())
}
