//! Synthetic pre-train / fine-tune task pairs.
//!
//! Every split draws from its own generator stream, so the pre-train,
//! fine-tune and evaluation sets are disjoint by construction and bit-identical
//! for a given seed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{Activation, LossKind, ToyModel};
use crate::linalg::{norm2, DenseMatrix};

/// Generator stream ids. One seed fans out into independent streams.
pub(crate) mod stream {
    pub const TEACHER: u64 = 1;
    pub const SHIFT: u64 = 2;
    pub const PRETRAIN_TRAIN: u64 = 3;
    pub const PRETRAIN_EVAL: u64 = 4;
    pub const FINETUNE_TRAIN: u64 = 5;
    pub const FINETUNE_EVAL: u64 = 6;
    pub const STUDENT_INIT: u64 = 7;
    pub const PRETRAIN_SHUFFLE: u64 = 8;
    pub const FINETUNE_SHUFFLE: u64 = 9;
    pub const METHOD_INIT: u64 = 10;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    rng_for(seed, stream).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Random tanh teacher MLP, standard normal inputs.
    TeacherRegression,
    /// Gaussian clusters, one per class.
    ClusterClassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub d_in: usize,
    /// Output width for regression, number of classes for classification.
    pub d_out: usize,
    /// Teacher hidden widths (regression only).
    pub teacher_hidden: Vec<usize>,
    /// Teacher weight scale: entries are `N(0, gain²/fan_in)`.
    pub teacher_gain: f64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Observation noise on regression targets.
    pub noise_std: f64,
    /// Regression: Frobenius size `δ` of the perturbation added to each
    /// teacher weight. Classification: rotation angle in radians.
    pub shift: f64,
    /// Distance scale between cluster centers.
    pub cluster_spread: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::TeacherRegression,
            d_in: 16,
            d_out: 4,
            teacher_hidden: vec![32],
            teacher_gain: 1.5,
            n_train: 2048,
            n_eval: 1024,
            noise_std: 0.0,
            shift: 0.3,
            cluster_spread: 2.0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_in == 0 || self.d_out == 0 || self.d_in > 64 || self.d_out > 64 {
            return Err(format!(
                "d_in and d_out must be in 1..=64, got {} and {}",
                self.d_in, self.d_out
            ));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err("n_train and n_eval must be positive".into());
        }
        if self.teacher_hidden.iter().any(|&h| h == 0 || h > 64) {
            return Err("teacher hidden widths must be in 1..=64".into());
        }
        if self.kind == TaskKind::ClusterClassification && self.d_out < 2 {
            return Err("classification needs at least two classes".into());
        }
        if !(self.noise_std >= 0.0 && self.shift.is_finite() && self.teacher_gain > 0.0) {
            return Err("noise_std must be >= 0, shift finite, teacher_gain > 0".into());
        }
        Ok(())
    }

    pub fn loss(&self) -> LossKind {
        match self.kind {
            TaskKind::TeacherRegression => LossKind::Mse,
            TaskKind::ClusterClassification => LossKind::CrossEntropy,
        }
    }

    pub fn activation(&self) -> Activation {
        match self.kind {
            TaskKind::TeacherRegression => Activation::Tanh,
            TaskKind::ClusterClassification => Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Real(DenseMatrix),
    Labels(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DenseMatrix,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` as a new dataset.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let pick =
            |m: &DenseMatrix| DenseMatrix::from_fn(idx.len(), m.cols(), |r, c| m[(idx[r], c)]);
        Dataset {
            inputs: pick(&self.inputs),
            targets: match &self.targets {
                Targets::Real(y) => Targets::Real(pick(y)),
                Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            },
        }
    }
}

/// A pre-training task and its shifted fine-tuning counterpart.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub seed: u64,
    pub pretrain_train: Dataset,
    pub pretrain_eval: Dataset,
    pub finetune_train: Dataset,
    pub finetune_eval: Dataset,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        std * v
    })
}

fn teacher(spec: &TaskSpec, seed: u64) -> ToyModel {
    let mut rng = rng_for(seed, stream::TEACHER);
    let mut sizes = vec![spec.d_in];
    sizes.extend(&spec.teacher_hidden);
    sizes.push(spec.d_out);
    ToyModel::random(
        &sizes,
        Activation::Tanh,
        LossKind::Mse,
        spec.teacher_gain,
        true,
        &mut rng,
    )
}

/// `W + δ·G` on every teacher layer, `G` Gaussian with unit Frobenius norm.
fn shifted_teacher(base: &ToyModel, delta: f64, seed: u64) -> ToyModel {
    let mut rng = rng_for(seed, stream::SHIFT);
    let mut out = base.clone();
    for layer in &mut out.layers {
        let (m, n) = layer.weight.shape();
        let g = gaussian_matrix(m, n, 1.0, &mut rng);
        let norm = g.frobenius_norm();
        layer.weight.axpy(delta / norm, &g).expect("same shape");
    }
    out
}

fn regression_split(
    spec: &TaskSpec,
    teacher: &ToyModel,
    n: usize,
    seed: u64,
    stream: u64,
) -> Dataset {
    let mut rng = rng_for(seed, stream);
    let inputs = gaussian_matrix(n, spec.d_in, 1.0, &mut rng);
    let mut y = teacher.predict(&inputs);
    if spec.noise_std > 0.0 {
        for v in y.as_mut_slice() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise_std * e;
        }
    }
    Dataset {
        inputs,
        targets: Targets::Real(y),
    }
}

/// Rotation by `angle` in the plane spanned by two random orthonormal vectors.
fn random_plane_rotation(d: usize, angle: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let mut rot = DenseMatrix::identity(d);
    if d < 2 {
        return rot;
    }
    let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let nu = norm2(&u);
    u.iter_mut().for_each(|v| *v /= nu);
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(b, a)| *b -= proj * a);
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let (c, s) = (angle.cos(), angle.sin());
    // R = I + (c-1)(uuᵀ + vvᵀ) + s(vuᵀ - uvᵀ)
    for i in 0..d {
        for j in 0..d {
            rot[(i, j)] +=
                (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
        }
    }
    rot
}

fn cluster_split(centers: &DenseMatrix, n: usize, seed: u64, stream: u64) -> Dataset {
    let mut rng = rng_for(seed, stream);
    let (c, d) = centers.shape();
    let mut labels = Vec::with_capacity(n);
    let inputs = DenseMatrix::from_fn(n, d, |r, j| {
        if j == 0 {
            labels.push(rng.random_range(0..c));
        }
        let noise: f64 = StandardNormal.sample(&mut rng);
        centers[(labels[r], j)] + noise
    });
    Dataset {
        inputs,
        targets: Targets::Labels(labels),
    }
}

impl SyntheticTask {
    pub fn generate(spec: &TaskSpec, seed: u64) -> SyntheticTask {
        let (pre_train, pre_eval, ft_train, ft_eval) = match spec.kind {
            TaskKind::TeacherRegression => {
                let base = teacher(spec, seed);
                let shifted = shifted_teacher(&base, spec.shift, seed);
                (
                    regression_split(spec, &base, spec.n_train, seed, stream::PRETRAIN_TRAIN),
                    regression_split(spec, &base, spec.n_eval, seed, stream::PRETRAIN_EVAL),
                    regression_split(spec, &shifted, spec.n_train, seed, stream::FINETUNE_TRAIN),
                    regression_split(spec, &shifted, spec.n_eval, seed, stream::FINETUNE_EVAL),
                )
            }
            TaskKind::ClusterClassification => {
                let mut rng = rng_for(seed, stream::TEACHER);
                let centers = gaussian_matrix(spec.d_out, spec.d_in, spec.cluster_spread, &mut rng);
                let mut rng = rng_for(seed, stream::SHIFT);
                let rot = random_plane_rotation(spec.d_in, spec.shift, &mut rng);
                let rotated = crate::linalg::matmul_transpose_b(&centers, &rot)
                    .expect("d_in x d_in rotation");
                (
                    cluster_split(&centers, spec.n_train, seed, stream::PRETRAIN_TRAIN),
                    cluster_split(&centers, spec.n_eval, seed, stream::PRETRAIN_EVAL),
                    cluster_split(&rotated, spec.n_train, seed, stream::FINETUNE_TRAIN),
                    cluster_split(&rotated, spec.n_eval, seed, stream::FINETUNE_EVAL),
                )
            }
        };
        SyntheticTask {
            spec: spec.clone(),
            seed,
            pretrain_train: pre_train,
            pretrain_eval: pre_eval,
            finetune_train: ft_train,
            finetune_eval: ft_eval,
        }
    }
}
