//! LDU-based low-rank adaptation.
//!
//! A pre-trained weight is factorized once as `W0 = Pᵀ·L·diag(z)·U`; fine-tuning
//! then trains only the leading `r` diagonal entries and one scaling factor
//! `σ`, keeping everything else frozen in a residual matrix.
//!
//! - [`linalg`]: dense matrices, pivoted LU and LDU.
//! - [`adapter`]: adapter construction, forward pass, gradients, merging, and
//!   the LoRA baseline.
//! - [`optim`]: projected gradient descent over `(z_r, σ)`.
//! - [`harness`]: synthetic tasks, a small hand-differentiated MLP, fine-tuning
//!   methods and ablation grids.
//! - [`io`]: the binary adapter format, matrix files and metrics output.

pub mod adapter;
pub mod checksum;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod optim;

pub use adapter::{AdapterGradients, InitKind, InitMethod, LolduAdapter, LoraAdapter};
pub use linalg::{DenseMatrix, LduFactors};
pub use optim::{OptimState, OptimizerKind, ProjectionSpec};
