//! Small fully connected networks with hand-written reverse-mode gradients.
//!
//! The layer vocabulary is fixed: affine layers, one elementwise nonlinearity
//! between them (none after the last layer), and either mean squared error or
//! softmax cross-entropy on top. Batches are row-major: one sample per row.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::task::{Dataset, Targets};
use crate::checksum::checksum_f64s;
use crate::linalg::{matmul, matmul_transpose_a, matmul_transpose_b, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over every output element of the squared error.
    Mse,
    /// Mean over samples of `-log softmax(y)[label]`.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub loss: LossKind,
}

/// Borrowed view of one layer's parameters, so adapted layers can supply an
/// effective weight without touching the model.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams<'a> {
    pub weight: &'a DenseMatrix,
    pub bias: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Activations saved by [`forward`]: `inputs[l]` feeds layer `l`,
/// `pre[l]` is that layer's affine output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub inputs: Vec<DenseMatrix>,
    pub pre: Vec<DenseMatrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &DenseMatrix {
        self.pre.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

impl ToyModel {
    /// Weights `N(0, gain²/fan_in)`; biases zero unless `random_bias`.
    pub fn random(
        sizes: &[usize],
        activation: Activation,
        loss: LossKind,
        gain: f64,
        random_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = gain / (fan_in as f64).sqrt();
                let weight = DenseMatrix::from_fn(fan_out, fan_in, |_, _| {
                    std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                });
                let bias = (0..fan_out)
                    .map(|_| {
                        if random_bias {
                            0.1 * <StandardNormal as Distribution<f64>>::sample(
                                &StandardNormal,
                                rng,
                            )
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Linear { weight, bias }
            })
            .collect();
        Self {
            layers,
            activation,
            loss,
        }
    }

    pub fn params(&self) -> Vec<LayerParams<'_>> {
        self.layers
            .iter()
            .map(|l| LayerParams {
                weight: &l.weight,
                bias: &l.bias,
            })
            .collect()
    }

    pub fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn predict(&self, x: &DenseMatrix) -> DenseMatrix {
        forward(&self.params(), self.activation, x).output().clone()
    }

    pub fn evaluate(&self, data: &Dataset) -> EvalResult {
        evaluate(&self.params(), self.activation, self.loss, data)
    }

    pub fn checksum(&self) -> u64 {
        checksum_f64s(
            self.layers
                .iter()
                .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]),
        )
    }
}

fn add_bias_and_activate(
    pre: &mut DenseMatrix,
    bias: &[f64],
    act: Option<Activation>,
) -> Option<DenseMatrix> {
    let cols = pre.cols();
    for row in pre.as_mut_slice().chunks_exact_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    act.map(|a| {
        let mut out = pre.clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v = a.apply(*v));
        out
    })
}

pub fn forward(
    params: &[LayerParams<'_>],
    activation: Activation,
    x: &DenseMatrix,
) -> ForwardCache {
    let mut inputs = Vec::with_capacity(params.len());
    let mut pre = Vec::with_capacity(params.len());
    let mut current = x.clone();
    for (l, p) in params.iter().enumerate() {
        let mut z = matmul_transpose_b(&current, p.weight).expect("layer widths chain");
        let last = l + 1 == params.len();
        let next = add_bias_and_activate(&mut z, p.bias, (!last).then_some(activation));
        inputs.push(current);
        pre.push(z);
        if let Some(a) = next {
            current = a;
        } else {
            current = DenseMatrix::zeros(0, 0);
        }
    }
    ForwardCache { inputs, pre }
}

/// Loss value and its gradient with respect to the network output.
pub fn loss_and_grad(
    kind: LossKind,
    output: &DenseMatrix,
    targets: &Targets,
) -> (f64, DenseMatrix) {
    let (n, d) = output.shape();
    match (kind, targets) {
        (LossKind::Mse, Targets::Real(t)) => {
            let denom = (n * d) as f64;
            let mut grad = output.sub(t).expect("target shape");
            let loss = grad.as_slice().iter().map(|e| e * e).sum::<f64>() / denom;
            grad.as_mut_slice()
                .iter_mut()
                .for_each(|e| *e *= 2.0 / denom);
            (loss, grad)
        }
        (LossKind::CrossEntropy, Targets::Labels(labels)) => {
            let mut grad = DenseMatrix::zeros(n, d);
            let mut loss = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                let row = output.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                loss += log_z - row[label];
                for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
                    let p = (row[c] - log_z).exp();
                    *g = (p - if c == label { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            (loss / n as f64, grad)
        }
        _ => panic!("loss kind does not match target kind"),
    }
}

pub fn accuracy(output: &DenseMatrix, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &label)| {
            let row = output.row(*r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("non-empty row");
            best == label
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Reverse pass. `needs[l]` requests parameter gradients for layer `l`;
/// backpropagation stops below the lowest requested layer.
pub fn backward(
    params: &[LayerParams<'_>],
    activation: Activation,
    cache: &ForwardCache,
    d_output: DenseMatrix,
    needs: &[bool],
) -> Vec<Option<LayerGrads>> {
    let lowest = needs.iter().position(|&b| b);
    let mut grads: Vec<Option<LayerGrads>> = vec![None; params.len()];
    let Some(lowest) = lowest else {
        return grads;
    };
    let mut d_pre = d_output;
    for l in (lowest..params.len()).rev() {
        if needs[l] {
            let weight = matmul_transpose_a(&d_pre, &cache.inputs[l]).expect("shapes chain");
            let mut bias = vec![0.0; d_pre.cols()];
            for row in d_pre.as_slice().chunks_exact(d_pre.cols()) {
                for (b, g) in bias.iter_mut().zip(row) {
                    *b += g;
                }
            }
            grads[l] = Some(LayerGrads { weight, bias });
        }
        if l == lowest {
            break;
        }
        // Into the activation that produced inputs[l].
        let d_act = matmul(&d_pre, params[l].weight).expect("shapes chain");
        let z_prev = &cache.pre[l - 1];
        let a_prev = &cache.inputs[l];
        let data = d_act
            .as_slice()
            .iter()
            .zip(z_prev.as_slice().iter().zip(a_prev.as_slice()))
            .map(|(g, (z, a))| g * activation.derivative(*z, *a))
            .collect();
        d_pre = DenseMatrix::from_vec_unchecked(d_act.rows(), d_act.cols(), data);
    }
    grads
}

pub fn evaluate(
    params: &[LayerParams<'_>],
    activation: Activation,
    loss: LossKind,
    data: &Dataset,
) -> EvalResult {
    let cache = forward(params, activation, &data.inputs);
    let (value, _) = loss_and_grad(loss, cache.output(), &data.targets);
    let accuracy = match &data.targets {
        Targets::Labels(l) => Some(accuracy(cache.output(), l)),
        Targets::Real(_) => None,
    };
    EvalResult {
        loss: value,
        accuracy,
    }
}
