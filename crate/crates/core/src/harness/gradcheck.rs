//! Finite-difference validation of every analytic gradient used in training.
//!
//! Each case compares analytic gradients against central differences of a
//! scalar loss. Adapter cases use the linear loss `uᵀ·h(x)`; network cases use
//! a tanh MLP with MSE, with a LoLDU adapter on the first layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{backward, forward, loss_and_grad, Activation, LayerParams, LossKind, ToyModel};
use super::task::{rng_for, Targets};
use super::HarnessError;
use crate::adapter::{InitKind, InitMethod, LolduAdapter, LoraAdapter};
use crate::linalg::{dot, DenseMatrix};

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-6;
/// Entries below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

/// Deliberate damage applied to analytic gradients, for negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    None,
    SignFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub label: String,
    pub shape: (usize, usize),
    pub rank: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_error(*a, *n))
        .fold(0.0, f64::max)
}

fn corrupt(mut g: Vec<f64>, corruption: Corruption) -> Vec<f64> {
    if corruption == Corruption::SignFlip {
        g.iter_mut().for_each(|v| *v = -*v);
    }
    g
}

fn normal_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Central difference of `f` with respect to each coordinate of `params`.
fn central_differences(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + STEP;
            let plus = f(&p);
            p[i] = orig - STEP;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * STEP)
        })
        .collect()
}

const STOCHASTIC_INITS: [InitKind; 4] = [
    InitKind::RegularLdu,
    InitKind::UniformSym1,
    InitKind::NormalStd,
    InitKind::NormalMatched,
];

fn random_loldu(rng: &mut ChaCha8Rng) -> Result<LolduAdapter, HarnessError> {
    let m = rng.random_range(1..=12);
    let n = rng.random_range(1..=12);
    let r = rng.random_range(1..=m.min(n));
    let w = normal_matrix(m, n, rng);
    let init = STOCHASTIC_INITS[rng.random_range(0..STOCHASTIC_INITS.len())];
    let alpha = rng.random_range(0.1..=r as f64);
    Ok(LolduAdapter::new(
        &w,
        r,
        alpha,
        InitMethod::new(init, rng.random()),
    )?)
}

fn loldu_case(
    adapter: &LolduAdapter,
    upstream: &[f64],
    x: &[f64],
    corruption: Corruption,
) -> Result<f64, HarnessError> {
    let g = adapter.gradients(x, upstream)?;
    let mut params = adapter.z().to_vec();
    params.push(adapter.sigma());
    let mut probe = adapter.clone();
    let numeric = central_differences(&params, |p| {
        let (z, s) = p.split_at(p.len() - 1);
        probe.set_z(z.to_vec()).expect("same rank");
        probe.set_sigma(s[0]);
        dot(upstream, &probe.forward(x).expect("shapes checked"))
    });
    let mut analytic = g.z;
    analytic.push(g.sigma);
    Ok(worst(&corrupt(analytic, corruption), &numeric))
}

fn lora_case(rng: &mut ChaCha8Rng, corruption: Corruption) -> Result<GradcheckCase, HarnessError> {
    let m = rng.random_range(1..=12);
    let n = rng.random_range(1..=12);
    let r = rng.random_range(1..=m.min(n));
    let w = normal_matrix(m, n, rng);
    let mut lora = LoraAdapter::new(&w, r, r as f64, rng.random())?;
    // Nonzero B so the gradient with respect to A is exercised.
    lora.b = normal_matrix(m, r, rng);
    let x = normal_vec(n, rng);
    let u = normal_vec(m, rng);
    let g = lora.gradients(&x, &u)?;

    let nb = lora.b.as_slice().len();
    let mut params = lora.b.as_slice().to_vec();
    params.extend_from_slice(lora.a.as_slice());
    let mut probe = lora.clone();
    let numeric = central_differences(&params, |p| {
        probe.b.as_mut_slice().copy_from_slice(&p[..nb]);
        probe.a.as_mut_slice().copy_from_slice(&p[nb..]);
        dot(&u, &probe.forward(&x).expect("shapes checked"))
    });
    let mut analytic = g.b.into_vec();
    analytic.extend(g.a.into_vec());
    Ok(GradcheckCase {
        label: "lora".into(),
        shape: (m, n),
        rank: r,
        max_rel_error: worst(&corrupt(analytic, corruption), &numeric),
    })
}

/// Tanh MLP with a LoLDU adapter on layer 0; checks the adapter's
/// weight-space gradient path and the dense gradients of every other layer.
fn network_case(
    rng: &mut ChaCha8Rng,
    corruption: Corruption,
) -> Result<GradcheckCase, HarnessError> {
    let d_in = rng.random_range(2..=8);
    let hidden = rng.random_range(2..=8);
    let d_out = rng.random_range(1..=4);
    let model = ToyModel::random(
        &[d_in, hidden, d_out],
        Activation::Tanh,
        LossKind::Mse,
        1.2,
        true,
        rng,
    );
    let r = rng.random_range(1..=d_in.min(hidden));
    let adapter = LolduAdapter::new(
        &model.layers[0].weight,
        r,
        r as f64,
        InitMethod::new(InitKind::NormalStd, rng.random()),
    )?;
    let batch = 5;
    let x = normal_matrix(batch, d_in, rng);
    let targets = Targets::Real(normal_matrix(batch, d_out, rng));

    let loss_with = |w0: &DenseMatrix, head: &DenseMatrix| {
        let params = [
            LayerParams {
                weight: w0,
                bias: &model.layers[0].bias,
            },
            LayerParams {
                weight: head,
                bias: &model.layers[1].bias,
            },
        ];
        let cache = forward(&params, Activation::Tanh, &x);
        loss_and_grad(LossKind::Mse, cache.output(), &targets).0
    };

    let merged = adapter.merged_weight();
    let head = &model.layers[1].weight;
    let params = [
        LayerParams {
            weight: &merged,
            bias: &model.layers[0].bias,
        },
        LayerParams {
            weight: head,
            bias: &model.layers[1].bias,
        },
    ];
    let cache = forward(&params, Activation::Tanh, &x);
    let (_, d_out_grad) = loss_and_grad(LossKind::Mse, cache.output(), &targets);
    let grads = backward(&params, Activation::Tanh, &cache, d_out_grad, &[true, true]);
    let g0 = grads[0].as_ref().expect("requested");
    let g1 = grads[1].as_ref().expect("requested");
    let ga = adapter.gradients_from_weight_grad(&g0.weight)?;

    let mut probe = adapter.clone();
    let mut zs = adapter.z().to_vec();
    zs.push(adapter.sigma());
    let numeric_adapter = central_differences(&zs, |p| {
        let (z, s) = p.split_at(p.len() - 1);
        probe.set_z(z.to_vec()).expect("same rank");
        probe.set_sigma(s[0]);
        loss_with(&probe.merged_weight(), head)
    });
    let numeric_head = central_differences(head.as_slice(), |p| {
        let h = DenseMatrix::new(head.rows(), head.cols(), p.to_vec()).expect("same shape");
        loss_with(&merged, &h)
    });

    let mut analytic = ga.z;
    analytic.push(ga.sigma);
    let mut numeric = numeric_adapter;
    analytic.extend_from_slice(g1.weight.as_slice());
    numeric.extend(numeric_head);
    Ok(GradcheckCase {
        label: "mlp+loldu".into(),
        shape: (hidden, d_in),
        rank: r,
        max_rel_error: worst(&corrupt(analytic, corruption), &numeric),
    })
}

/// Runs `count` random LoLDU cases plus one LoRA and one network case per
/// LoLDU case, and a zero-upstream case whose error must be exactly zero.
pub fn gradcheck_suite(
    count: usize,
    seed: u64,
    corruption: Corruption,
) -> Result<GradcheckReport, HarnessError> {
    if count == 0 {
        return Err(HarnessError::InvalidConfig(
            "gradcheck count must be at least 1".into(),
        ));
    }
    let mut rng = rng_for(seed, 0);
    let mut cases = Vec::with_capacity(3 * count + 1);
    for _ in 0..count {
        let adapter = random_loldu(&mut rng)?;
        let (m, n) = adapter.base_shape();
        let x = normal_vec(n, &mut rng);
        let u = normal_vec(m, &mut rng);
        cases.push(GradcheckCase {
            label: format!("loldu/{}", adapter.init().kind),
            shape: (m, n),
            rank: adapter.rank(),
            max_rel_error: loldu_case(&adapter, &u, &x, corruption)?,
        });
        cases.push(lora_case(&mut rng, corruption)?);
        cases.push(network_case(&mut rng, corruption)?);
    }

    let adapter = random_loldu(&mut rng)?;
    let (m, n) = adapter.base_shape();
    let x = normal_vec(n, &mut rng);
    cases.push(GradcheckCase {
        label: "loldu/zero-upstream".into(),
        shape: (m, n),
        rank: adapter.rank(),
        max_rel_error: loldu_case(&adapter, &vec![0.0; m], &x, corruption)?,
    });

    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        cases,
        max_rel_error,
        tolerance: GRADCHECK_TOLERANCE,
    })
}
