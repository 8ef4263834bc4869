//! Ablation grids: every cell of (method × rank × init × scaling × lr) is run
//! once per seed on the same pre-trained model for that seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::finetune::{
    finetune, pretrain, FinetuneConfig, Method, MethodKind, ModelSpec, RankChoice, RunMetrics,
    ScalingMode, TrainConfig,
};
use super::model::EvalResult;
use super::task::{SyntheticTask, TaskSpec};
use super::HarnessError;
use crate::adapter::InitKind;
use crate::io::MetricsRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub pretrain: TrainConfig,
    /// Shared fine-tuning settings; its `lr` is replaced by each grid lr.
    pub finetune: FinetuneConfig,
    pub methods: Vec<MethodKind>,
    pub ranks: Vec<RankChoice>,
    pub inits: Vec<InitKind>,
    pub scaling: Vec<ScalingMode>,
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    /// LoRA/LoLDU `α`; defaults to the resolved rank.
    pub alpha: Option<f64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            model: ModelSpec::default(),
            pretrain: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            finetune: FinetuneConfig::default(),
            methods: vec![MethodKind::Loldu],
            ranks: vec![RankChoice::Full],
            inits: vec![InitKind::RegularLdu],
            scaling: vec![ScalingMode::Trainable],
            lrs: vec![3e-3],
            seeds: vec![0],
            alpha: None,
        }
    }
}

/// One grid coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub method: Method,
    pub lr: f64,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!("{} lr={}", self.method.label(), self.lr)
    }
}

impl AblationSpec {
    pub fn validate(&self) -> Result<(), String> {
        self.task.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.train.validate()?;
        if self.methods.is_empty() || self.lrs.is_empty() || self.seeds.is_empty() {
            return Err("methods, lrs and seeds must be non-empty".into());
        }
        let adapters = self
            .methods
            .iter()
            .any(|m| matches!(m, MethodKind::Lora | MethodKind::Loldu));
        if adapters && self.ranks.is_empty() {
            return Err("ranks must be non-empty for adapter methods".into());
        }
        if self.methods.contains(&MethodKind::Loldu)
            && (self.inits.is_empty() || self.scaling.is_empty())
        {
            return Err("inits and scaling must be non-empty for loldu".into());
        }
        if let Some(&lr) = self.lrs.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
            return Err(format!("learning rates must be positive, got {lr}"));
        }
        let sizes = self.model.sizes(&self.task);
        let min_k = sizes
            .windows(2)
            .take(sizes.len() - 2)
            .map(|w| w[0].min(w[1]))
            .min()
            .unwrap_or(usize::MAX);
        for rank in &self.ranks {
            if let RankChoice::Fixed(r) = rank {
                if *r == 0 || *r > min_k {
                    return Err(format!(
                        "rank {r} outside 1..={min_k} for the adapted layers"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Cells in emission order: methods as listed, then ranks, inits,
    /// scaling and lr, innermost last.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for kind in &self.methods {
            let methods: Vec<Method> = match kind {
                MethodKind::FullFt => vec![Method::FullFt],
                MethodKind::LinearProbe => vec![Method::LinearProbe],
                MethodKind::Lora => self
                    .ranks
                    .iter()
                    .map(|&rank| Method::Lora {
                        rank,
                        alpha: self.alpha,
                    })
                    .collect(),
                MethodKind::Loldu => {
                    let mut v = Vec::new();
                    for &rank in &self.ranks {
                        for &init in &self.inits {
                            for &scaling in &self.scaling {
                                v.push(Method::Loldu {
                                    rank,
                                    alpha: self.alpha,
                                    init,
                                    scaling,
                                });
                            }
                        }
                    }
                    v
                }
            };
            for method in methods {
                for &lr in &self.lrs {
                    out.push(AblationCell {
                        method: method.clone(),
                        lr,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub cell: usize,
    pub seed: u64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub seed: u64,
    pub eval_loss: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    /// Cell-major, seeds in spec order.
    pub runs: Vec<AblationRun>,
    pub pretrained: Vec<PretrainSummary>,
}

impl AblationReport {
    pub fn runs_for(&self, cell: usize) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.cell == cell)
    }

    /// Median final eval loss of a cell; diverged runs count as `+inf`.
    pub fn median_final_loss(&self, cell: usize) -> f64 {
        let v: Vec<f64> = self
            .runs_for(cell)
            .map(|r| {
                let l = r.metrics.final_eval_loss();
                if l.is_finite() {
                    l
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        median(&v)
    }

    /// Median score of a cell (higher is better).
    pub fn median_score(&self, cell: usize) -> f64 {
        let v: Vec<f64> = self.runs_for(cell).map(|r| r.metrics.score()).collect();
        median(&v)
    }

    pub fn find_cell(&self, pred: impl Fn(&AblationCell) -> bool) -> Option<usize> {
        self.cells.iter().position(pred)
    }

    /// Flat records: per-epoch losses and accuracy, then per-run summaries
    /// at the final epoch. Wall-clock time is left out so the table is
    /// reproducible.
    pub fn records(&self) -> Vec<MetricsRecord> {
        let mut out = Vec::new();
        for run in &self.runs {
            let cell = &self.cells[run.cell];
            let (rank, init, scaling) = match &cell.method {
                Method::Lora { rank, .. } => (rank.to_string(), String::new(), String::new()),
                Method::Loldu {
                    rank,
                    init,
                    scaling,
                    ..
                } => (
                    rank.to_string(),
                    init.to_string(),
                    scaling.name().to_string(),
                ),
                _ => Default::default(),
            };
            let record = |epoch: usize, metric: &str, value: f64| MetricsRecord {
                run_id: format!("c{:03}-s{}", run.cell, run.seed),
                method: cell.method.kind().name().to_string(),
                rank: rank.clone(),
                init: init.clone(),
                scaling: scaling.clone(),
                lr: cell.lr.to_string(),
                seed: run.seed,
                epoch: epoch as u32,
                metric: metric.to_string(),
                value: Some(value),
            };
            let m = &run.metrics;
            for (e, &v) in m.eval_loss.iter().enumerate() {
                if e > 0 {
                    if let Some(&t) = m.train_loss.get(e - 1) {
                        out.push(record(e, "train_loss", t));
                    }
                }
                out.push(record(e, "eval_loss", v));
                if let Some(acc) = m.eval_accuracy.as_ref().and_then(|a| a.get(e)) {
                    out.push(record(e, "eval_accuracy", *acc));
                }
            }
            let last = m.eval_loss.len().saturating_sub(1);
            out.push(record(last, "trainable_params", m.trainable_params as f64));
            out.push(record(last, "diverged", if m.diverged { 1.0 } else { 0.0 }));
            out.push(record(last, "steps", m.steps as f64));
        }
        out
    }
}

/// Median with NaN ordered last; NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with tie-averaged ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "paired samples");
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Runs the grid with at most `jobs` worker threads. Results do not depend
/// on `jobs`.
pub fn ablate(spec: &AblationSpec, jobs: usize) -> Result<AblationReport, HarnessError> {
    spec.validate().map_err(HarnessError::InvalidConfig)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| run_grid(spec))
}

fn run_grid(spec: &AblationSpec) -> Result<AblationReport, HarnessError> {
    let bases = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let task = SyntheticTask::generate(&spec.task, seed);
            let pre = pretrain(&task, &spec.model, &spec.pretrain)?;
            Ok((task, pre))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let cells = spec.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..spec.seeds.len()).map(move |s| (c, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(c, s)| {
            let (task, pre) = &bases[s];
            let cfg = FinetuneConfig {
                train: TrainConfig {
                    lr: cells[c].lr,
                    ..spec.finetune.train.clone()
                },
                ..spec.finetune.clone()
            };
            let out = finetune(
                &pre.model,
                &cells[c].method,
                &task.finetune_train,
                &task.finetune_eval,
                &cfg,
                task.seed,
            )?;
            Ok(AblationRun {
                cell: c,
                seed: task.seed,
                metrics: out.metrics,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let pretrained = bases
        .iter()
        .map(|(task, pre)| {
            let EvalResult { loss, accuracy } = pre.eval;
            PretrainSummary {
                seed: task.seed,
                eval_loss: loss,
                eval_accuracy: accuracy,
            }
        })
        .collect();
    Ok(AblationReport {
        cells,
        runs,
        pretrained,
    })
}
