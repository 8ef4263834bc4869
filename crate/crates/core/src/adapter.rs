//! LDU-based low-rank adapters.
//!
//! A pre-trained weight `W0 = Pᵀ·L·diag(z)·U` is split into a frozen residual
//! and a rank-`r` update `ΔW = σ·Pᵀ·L_r·diag(z_r)·U_r` in which only `z_r` and
//! the scalar `σ` are trained. The diagonal is never materialized; every
//! product scales rows or columns element-wise instead.
//!
//! The LoRA baseline (`ΔW = (α/r)·B·A`) lives in [`lora`].

pub mod lora;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum::checksum_f64s;
use crate::linalg::{self, dot, matmul, matmul_transpose_b, DenseMatrix, LduFactors, LinalgError};

pub use lora::{LoraAdapter, LoraGradients};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("expected vector of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid adapter state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

/// How the trainable diagonal is (re)initialized after the residual has been
/// computed. `z̄` below is the mean of the truncated LDU diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Keep the LDU diagonal as is.
    RegularLdu,
    /// Every entry set to `z̄`.
    Constant,
    /// `U(-1, 1)`.
    UniformSym1,
    /// `U(-z̄/2, z̄/2)`.
    UniformMeanHalf,
    /// `N(0, 1)`.
    NormalStd,
    /// `N(z̄, std(z_r))`, sample standard deviation.
    NormalMatched,
    Zeros,
    Ones,
}

impl InitKind {
    pub const ALL: [InitKind; 8] = [
        InitKind::RegularLdu,
        InitKind::Constant,
        InitKind::UniformSym1,
        InitKind::UniformMeanHalf,
        InitKind::NormalStd,
        InitKind::NormalMatched,
        InitKind::Zeros,
        InitKind::Ones,
    ];

    pub fn tag(self) -> u8 {
        match self {
            InitKind::RegularLdu => 0,
            InitKind::Constant => 1,
            InitKind::UniformSym1 => 2,
            InitKind::UniformMeanHalf => 3,
            InitKind::NormalStd => 4,
            InitKind::NormalMatched => 5,
            InitKind::Zeros => 6,
            InitKind::Ones => 7,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            InitKind::RegularLdu => "regular_ldu",
            InitKind::Constant => "constant",
            InitKind::UniformSym1 => "uniform_sym1",
            InitKind::UniformMeanHalf => "uniform_mean_half",
            InitKind::NormalStd => "normal_std",
            InitKind::NormalMatched => "normal_matched",
            InitKind::Zeros => "zeros",
            InitKind::Ones => "ones",
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            InitKind::UniformSym1
                | InitKind::UniformMeanHalf
                | InitKind::NormalStd
                | InitKind::NormalMatched
        )
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                format!(
                    "unknown init method {s:?}; expected one of {}",
                    names.join(", ")
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InitMethod {
    pub kind: InitKind,
    pub seed: u64,
}

impl InitMethod {
    pub fn new(kind: InitKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn regular() -> Self {
        Self::new(InitKind::RegularLdu, 0)
    }

    /// Replacement values for the truncated diagonal `z`.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let r = z.len();
        let mean = z.iter().sum::<f64>() / r as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.kind {
            InitKind::RegularLdu => z.to_vec(),
            InitKind::Constant => vec![mean; r],
            InitKind::Zeros => vec![0.0; r],
            InitKind::Ones => vec![1.0; r],
            InitKind::UniformSym1 => (0..r).map(|_| rng.random_range(-1.0..1.0)).collect(),
            InitKind::UniformMeanHalf => {
                let half = (mean / 2.0).abs();
                if half == 0.0 {
                    vec![0.0; r]
                } else {
                    (0..r).map(|_| rng.random_range(-half..half)).collect()
                }
            }
            InitKind::NormalStd => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                (0..r).map(|_| normal.sample(&mut rng)).collect()
            }
            InitKind::NormalMatched => {
                let std = sample_std(z, mean);
                let normal = Normal::new(mean, std).expect("finite non-negative std");
                (0..r).map(|_| normal.sample(&mut rng)).collect()
            }
        }
    }
}

fn sample_std(z: &[f64], mean: f64) -> f64 {
    if z.len() < 2 {
        return 0.0;
    }
    let ss: f64 = z.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (z.len() - 1) as f64).sqrt()
}

/// Gradients of a scalar loss with respect to the trainable adapter state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub z: Vec<f64>,
    pub sigma: f64,
}

impl AdapterGradients {
    pub fn zeros(rank: usize) -> Self {
        Self {
            z: vec![0.0; rank],
            sigma: 0.0,
        }
    }

    pub fn accumulate(&mut self, other: &AdapterGradients) {
        for (a, b) in self.z.iter_mut().zip(&other.z) {
            *a += b;
        }
        self.sigma += other.sigma;
    }

    pub fn is_finite(&self) -> bool {
        self.sigma.is_finite() && self.z.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LolduAdapter {
    perm: Vec<usize>,
    lower: DenseMatrix,
    upper: DenseMatrix,
    z: Vec<f64>,
    sigma: f64,
    rsm: DenseMatrix,
    alpha: f64,
    init: InitMethod,
}

impl LolduAdapter {
    /// Factorizes `w0` and builds a rank-`rank` adapter around it.
    pub fn new(w0: &DenseMatrix, rank: usize, alpha: f64, init: InitMethod) -> Result<Self> {
        let max = w0.rows().min(w0.cols());
        check_rank_alpha(rank, max, alpha)?;
        let factors = linalg::ldu(w0)?;
        Self::from_factors(w0, &factors, rank, alpha, init)
    }

    /// Builds an adapter from an existing factorization of `w0`.
    ///
    /// The residual is taken against the LDU diagonal before `init` replaces
    /// it, so any init other than `RegularLdu` (or `alpha != rank`) changes
    /// the effective weight at step zero.
    pub fn from_factors(
        w0: &DenseMatrix,
        factors: &LduFactors,
        rank: usize,
        alpha: f64,
        init: InitMethod,
    ) -> Result<Self> {
        let (m, n) = w0.shape();
        check_rank_alpha(rank, m.min(n), alpha)?;
        if factors.lower.rows() != m || factors.upper.cols() != n || factors.perm.len() != m {
            return Err(LinalgError::ShapeMismatch {
                op: "from_factors",
                left: w0.shape(),
                right: (factors.lower.rows(), factors.upper.cols()),
            }
            .into());
        }
        let lower = factors.lower.leading_columns(rank);
        let upper = factors.upper.leading_rows(rank);
        let z_pre = factors.diag[..rank].to_vec();
        let sigma = alpha / rank as f64;

        let mut adapter = Self {
            perm: factors.perm.clone(),
            lower,
            upper,
            z: z_pre,
            sigma,
            rsm: DenseMatrix::zeros(m, n),
            alpha,
            init,
        };
        adapter.rsm = w0.sub(&adapter.delta_w())?;
        adapter.z = init.apply(&adapter.z);
        Ok(adapter)
    }

    /// Reassembles an adapter from stored parts, validating shapes.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        perm: Vec<usize>,
        lower: DenseMatrix,
        upper: DenseMatrix,
        z: Vec<f64>,
        sigma: f64,
        rsm: DenseMatrix,
        alpha: f64,
        init: InitMethod,
    ) -> Result<Self> {
        let (m, n) = rsm.shape();
        let r = z.len();
        linalg::check_permutation(&perm)?;
        if perm.len() != m || lower.shape() != (m, r) || upper.shape() != (r, n) {
            return Err(AdapterError::InvalidState(format!(
                "inconsistent shapes: perm {}, L {:?}, U {:?}, z {}, rsm {:?}",
                perm.len(),
                lower.shape(),
                upper.shape(),
                r,
                rsm.shape()
            )));
        }
        check_rank_alpha(r, m.min(n), alpha)?;
        Ok(Self {
            perm,
            lower,
            upper,
            z,
            sigma,
            rsm,
            alpha,
            init,
        })
    }

    pub fn rank(&self) -> usize {
        self.z.len()
    }

    pub fn base_shape(&self) -> (usize, usize) {
        self.rsm.shape()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn init(&self) -> InitMethod {
        self.init
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    pub fn upper(&self) -> &DenseMatrix {
        &self.upper
    }

    pub fn residual(&self) -> &DenseMatrix {
        &self.rsm
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn set_z(&mut self, z: Vec<f64>) -> Result<()> {
        if z.len() != self.rank() {
            return Err(AdapterError::LengthMismatch {
                expected: self.rank(),
                got: z.len(),
            });
        }
        self.z = z;
        Ok(())
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        self.sigma = sigma;
    }

    /// Mutable access to exactly the trainable state.
    pub fn trainable_mut(&mut self) -> (&mut [f64], &mut f64) {
        (&mut self.z, &mut self.sigma)
    }

    /// Always `r + 1`, regardless of the base shape.
    pub fn trainable_param_count(&self) -> usize {
        self.rank() + 1
    }

    /// Digest over the fields that must never change after construction.
    pub fn frozen_checksum(&self) -> u64 {
        let perm: Vec<f64> = self.perm.iter().map(|&p| p as f64).collect();
        checksum_f64s([
            &perm[..],
            self.lower.as_slice(),
            self.upper.as_slice(),
            self.rsm.as_slice(),
            &[self.alpha][..],
        ])
    }

    pub fn trainable_checksum(&self) -> u64 {
        checksum_f64s([&self.z[..], &[self.sigma][..]])
    }

    /// `L_r` with column `i` scaled by `s·z_i`.
    fn scaled_lower(&self, s: f64) -> DenseMatrix {
        let mut out = self.lower.clone();
        let r = self.rank();
        for row in out.as_mut_slice().chunks_exact_mut(r) {
            for (v, z) in row.iter_mut().zip(&self.z) {
                *v *= s * z;
            }
        }
        out
    }

    /// `σ·Pᵀ·L_r·diag(z_r)·U_r`.
    pub fn delta_w(&self) -> DenseMatrix {
        let pivoted = matmul(&self.scaled_lower(self.sigma), &self.upper)
            .expect("adapter factors are shape-consistent");
        linalg::unpivot_rows(&self.perm, &pivoted)
    }

    pub fn merged_weight(&self) -> DenseMatrix {
        self.rsm
            .add(&self.delta_w())
            .expect("residual and update share a shape")
    }

    fn check_len(&self, v: &[f64], expected: usize) -> Result<()> {
        if v.len() != expected {
            return Err(AdapterError::LengthMismatch {
                expected,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `h = RSM·x + σ·Pᵀ·(L_r·(z ⊙ (U_r·x)))`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (m, n) = self.base_shape();
        self.check_len(x, n)?;
        let mut h = linalg::matvec(&self.rsm, x)?;
        let ux = linalg::matvec(&self.upper, x)?;
        let scaled: Vec<f64> = ux.iter().zip(&self.z).map(|(a, z)| a * z).collect();
        let lz = linalg::matvec(&self.lower, &scaled)?;
        debug_assert_eq!(lz.len(), m);
        for (p, v) in lz.iter().enumerate() {
            h[self.perm[p]] += self.sigma * v;
        }
        Ok(h)
    }

    /// Gradients for a single input `x` given `upstream = ∂loss/∂h`.
    pub fn gradients(&self, x: &[f64], upstream: &[f64]) -> Result<AdapterGradients> {
        Ok(self.backward(x, upstream)?.0)
    }

    /// Like [`gradients`](Self::gradients) but also returns `∂loss/∂x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(AdapterGradients, Vec<f64>)> {
        let (m, n) = self.base_shape();
        self.check_len(x, n)?;
        self.check_len(upstream, m)?;
        // Pᵀ applied on the output side means reading upstream through perm.
        let gathered: Vec<f64> = self.perm.iter().map(|&p| upstream[p]).collect();
        let ux = linalg::matvec(&self.upper, x)?;
        let lt_u = linalg::matvec_transpose(&self.lower, &gathered)?;

        let z_grad: Vec<f64> = lt_u
            .iter()
            .zip(&ux)
            .map(|(l, a)| self.sigma * l * a)
            .collect();
        let sigma_grad: f64 = lt_u
            .iter()
            .zip(&ux)
            .zip(&self.z)
            .map(|((l, a), z)| l * z * a)
            .sum();

        let mut grad_x = linalg::matvec_transpose(&self.rsm, upstream)?;
        let inner: Vec<f64> = lt_u
            .iter()
            .zip(&self.z)
            .map(|(l, z)| self.sigma * z * l)
            .collect();
        for (g, v) in grad_x
            .iter_mut()
            .zip(linalg::matvec_transpose(&self.upper, &inner)?)
        {
            *g += v;
        }
        Ok((
            AdapterGradients {
                z: z_grad,
                sigma: sigma_grad,
            },
            grad_x,
        ))
    }

    /// Chain rule from `G = ∂loss/∂W_eff` (shape `m × n`) to the trainable state.
    pub fn gradients_from_weight_grad(&self, g: &DenseMatrix) -> Result<AdapterGradients> {
        if g.shape() != self.base_shape() {
            return Err(LinalgError::ShapeMismatch {
                op: "gradients_from_weight_grad",
                left: g.shape(),
                right: self.base_shape(),
            }
            .into());
        }
        let r = self.rank();
        let gathered = DenseMatrix::from_fn(g.rows(), g.cols(), |p, q| g[(self.perm[p], q)]);
        // T = G̃·U_rᵀ, then s_i = Σ_p L[p,i]·T[p,i].
        let t = matmul_transpose_b(&gathered, &self.upper)?;
        let mut s = vec![0.0; r];
        for p in 0..t.rows() {
            for (i, acc) in s.iter_mut().enumerate() {
                *acc += self.lower[(p, i)] * t[(p, i)];
            }
        }
        Ok(AdapterGradients {
            z: s.iter().map(|v| self.sigma * v).collect(),
            sigma: dot(&s, &self.z),
        })
    }
}

fn check_rank_alpha(rank: usize, max: usize, alpha: f64) -> Result<()> {
    if rank == 0 || rank > max {
        return Err(AdapterError::RankOutOfRange { rank, max });
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(AdapterError::InvalidAlpha(alpha));
    }
    Ok(())
}
