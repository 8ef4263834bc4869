//! LoRA baseline: `h = W0·x + (α/r)·B·(A·x)` with `B` zero-initialized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_rank_alpha, AdapterError, Result};
use crate::checksum::checksum_f64s;
use crate::linalg::{
    self, matmul, matmul_transpose_a, matmul_transpose_b, DenseMatrix, LinalgError,
};

/// Standard deviation of the random `A` initialization.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    base: DenseMatrix,
    /// `m × r`, trainable.
    pub b: DenseMatrix,
    /// `r × n`, trainable.
    pub a: DenseMatrix,
    alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGradients {
    pub b: DenseMatrix,
    pub a: DenseMatrix,
}

impl LoraAdapter {
    pub fn new(w0: &DenseMatrix, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let (m, n) = w0.shape();
        check_rank_alpha(rank, m.min(n), alpha)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, LORA_INIT_STD).expect("valid std");
        Ok(Self {
            base: w0.clone(),
            b: DenseMatrix::zeros(m, rank),
            a: DenseMatrix::from_fn(rank, n, |_, _| normal.sample(&mut rng)),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn base(&self) -> &DenseMatrix {
        &self.base
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `r·(m + n)`.
    pub fn trainable_param_count(&self) -> usize {
        self.rank() * (self.base.rows() + self.base.cols())
    }

    pub fn trainable_checksum(&self) -> u64 {
        checksum_f64s([self.b.as_slice(), self.a.as_slice()])
    }

    pub fn frozen_checksum(&self) -> u64 {
        checksum_f64s([self.base.as_slice(), &[self.alpha][..]])
    }

    pub fn delta_w(&self) -> DenseMatrix {
        matmul(&self.b, &self.a)
            .expect("B and A are shape-consistent")
            .scaled(self.scaling())
    }

    pub fn merged_weight(&self) -> DenseMatrix {
        self.base.add(&self.delta_w()).expect("same shape")
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = linalg::matvec(&self.base, x)?;
        let ax = linalg::matvec(&self.a, x)?;
        let bax = linalg::matvec(&self.b, &ax)?;
        let s = self.scaling();
        for (h, v) in h.iter_mut().zip(bax) {
            *h += s * v;
        }
        Ok(h)
    }

    pub fn gradients(&self, x: &[f64], upstream: &[f64]) -> Result<LoraGradients> {
        let (m, n) = self.base.shape();
        if x.len() != n {
            return Err(AdapterError::LengthMismatch {
                expected: n,
                got: x.len(),
            });
        }
        if upstream.len() != m {
            return Err(AdapterError::LengthMismatch {
                expected: m,
                got: upstream.len(),
            });
        }
        let s = self.scaling();
        let ax = linalg::matvec(&self.a, x)?;
        let btu = linalg::matvec_transpose(&self.b, upstream)?;
        let r = self.rank();
        Ok(LoraGradients {
            b: DenseMatrix::from_fn(m, r, |i, j| s * upstream[i] * ax[j]),
            a: DenseMatrix::from_fn(r, n, |i, j| s * btu[i] * x[j]),
        })
    }

    /// Chain rule from `G = ∂loss/∂W_eff`: `∂B = s·G·Aᵀ`, `∂A = s·Bᵀ·G`.
    pub fn gradients_from_weight_grad(&self, g: &DenseMatrix) -> Result<LoraGradients> {
        if g.shape() != self.base.shape() {
            return Err(LinalgError::ShapeMismatch {
                op: "lora_gradients_from_weight_grad",
                left: g.shape(),
                right: self.base.shape(),
            }
            .into());
        }
        let s = self.scaling();
        Ok(LoraGradients {
            b: matmul_transpose_b(g, &self.a)?.scaled(s),
            a: matmul_transpose_a(&self.b, g)?.scaled(s),
        })
    }
}
