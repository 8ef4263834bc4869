//! `loldu`: decompose weight matrices into LoLDU adapters, fine-tune toy
//! models, run ablation grids, merge and inspect adapter files, and check
//! gradients.
//!
//! Exit codes: 0 success, 1 check failure, 2 numeric or domain error,
//! 3 bad input, 4 bad configuration.

mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use loldu_core::adapter::{InitKind, InitMethod, LolduAdapter};
use loldu_core::harness::ablation::{AblationReport, AblationRun, PretrainSummary};
use loldu_core::harness::gradcheck::{gradcheck_suite, Corruption};
use loldu_core::harness::{ablate, finetune, pretrain, AblationCell, RankChoice, SyntheticTask};
use loldu_core::io::{self, MatrixEncoding, Precision, SaveMode};
use loldu_core::linalg::{self, norm2};
use serde::Serialize;

use config::RunConfig;
use error::{CliError, Result};

const SEED_ENV: &str = "LOLDU_SEED";

#[derive(Parser)]
#[command(
    name = "loldu",
    version,
    about = "LoLDU adapters: decomposition, training, ablation, merging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an adapter from a weight matrix and write it as an adapter file.
    Decompose(DecomposeArgs),
    /// Pre-train a toy model and fine-tune it with one method.
    Train(RunArgs),
    /// Run every cell of the configured grid.
    Ablate(AblateArgs),
    /// Write the merged weight `rsm + ΔW` of an adapter file.
    Merge(MergeArgs),
    /// Print the contents of an adapter file.
    Inspect(InspectArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct DecomposeArgs {
    /// Matrix file (text or binary).
    input: PathBuf,
    /// Integer, `full`, or `full/N`.
    #[arg(short, long)]
    rank: RankChoice,
    /// Defaults to the rank.
    #[arg(short, long)]
    alpha: Option<f64>,
    #[arg(long, default_value = "regular_ldu")]
    init: InitKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
    /// Store only perm, z_r and σ; loading then needs the base matrix.
    #[arg(long)]
    compact: bool,
    /// Store floats as f32.
    #[arg(long)]
    f32: bool,
    /// Retry singular matrices once with a tiny seeded perturbation.
    #[arg(long)]
    jitter: bool,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Worker threads for grid cells.
    #[arg(short, long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct MergeArgs {
    adapter: PathBuf,
    /// Base matrix, required for compact adapter files.
    #[arg(short, long)]
    base: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    /// Write the binary matrix encoding instead of text.
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct InspectArgs {
    adapter: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorruptArg {
    None,
    SignFlip,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(short, long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Damage the analytic gradients (negative control).
    #[arg(long, value_enum, default_value = "none")]
    corrupt: CorruptArg,
    /// Print every case.
    #[arg(short, long)]
    verbose: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Decompose(a) => decompose(a),
        Command::Train(a) => train(a),
        Command::Ablate(a) => run_ablation(a),
        Command::Merge(a) => merge(a),
        Command::Inspect(a) => inspect(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn stats(v: &[f64]) -> (f64, f64, f64) {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    (min, max, mean)
}

fn print_adapter_summary(a: &LolduAdapter) {
    let (m, n) = a.base_shape();
    let (min, max, mean) = stats(a.z());
    println!("shape      {m} x {n}");
    println!("rank       {} (max {})", a.rank(), m.min(n));
    println!("alpha      {}", a.alpha());
    println!("sigma      {}", a.sigma());
    println!("init       {} (seed {})", a.init().kind, a.init().seed);
    println!("rsm_fro    {:e}", a.residual().frobenius_norm());
    println!(
        "z_r        min {min:e}  max {max:e}  mean {mean:e}  norm {:e}",
        norm2(a.z())
    );
    println!("trainable  {}", a.trainable_param_count());
}

fn decompose(args: DecomposeArgs) -> Result<()> {
    let w = io::read_matrix(&read_file(&args.input)?)?;
    let k = w.rows().min(w.cols());
    let rank = args.rank.resolve(k);
    if rank == 0 || rank > k {
        return Err(CliError::Input(format!(
            "rank {rank} outside 1..={k} for a {} x {} matrix",
            w.rows(),
            w.cols()
        )));
    }
    let alpha = args.alpha.unwrap_or(rank as f64);
    let init = InitMethod::new(args.init, args.seed);
    let (adapter, jittered) = if args.jitter {
        let (factors, jittered) = linalg::ldu_with_jitter(&w, args.seed)?;
        (
            LolduAdapter::from_factors(&w, &factors, rank, alpha, init)?,
            jittered,
        )
    } else {
        (LolduAdapter::new(&w, rank, alpha, init)?, false)
    };
    let mode = if args.compact {
        SaveMode::Compact
    } else {
        SaveMode::Full
    };
    let precision = if args.f32 {
        Precision::F32
    } else {
        Precision::F64
    };
    let bytes = io::save_adapter_with(&adapter, mode, precision);
    write_file(&args.output, &bytes)?;
    print_adapter_summary(&adapter);
    println!("jitter     {}", if jittered { "applied" } else { "no" });
    println!(
        "file       {} ({} bytes, {mode:?}, {precision:?})",
        args.output.display(),
        bytes.len()
    );
    Ok(())
}

fn merge(args: MergeArgs) -> Result<()> {
    let bytes = read_file(&args.adapter)?;
    let base = match &args.base {
        Some(p) => Some(io::read_matrix(&read_file(p)?)?),
        None => None,
    };
    let adapter = io::load_adapter(&bytes, base.as_ref())?;
    let merged = adapter.merged_weight();
    let encoding = if args.binary {
        MatrixEncoding::Binary
    } else {
        MatrixEncoding::Text
    };
    write_file(
        &args.output,
        io::matrix_file::encode_matrix(&merged, encoding),
    )?;
    println!(
        "merged {} x {} -> {}",
        merged.rows(),
        merged.cols(),
        args.output.display()
    );
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let bytes = read_file(&args.adapter)?;
    let header = io::read_header_unverified(&bytes)?;
    let crc = io::verify_crc(&bytes);
    println!(
        "file       {} ({} bytes)",
        args.adapter.display(),
        bytes.len()
    );
    println!("version    {}", header.version);
    println!(
        "flags      {:#06x} ({:?}, {:?})",
        header.flags,
        header.mode(),
        header.precision()
    );
    println!("shape      {} x {}", header.m, header.n);
    println!("rank       {}", header.r);
    println!("alpha      {}", header.alpha);
    println!("sigma      {}", header.sigma);
    println!(
        "init       {} (seed {})",
        header.init.kind, header.init.seed
    );
    match crc {
        Ok(()) => println!("crc        ok"),
        Err(e) => {
            println!("crc        FAILED ({e})");
            return Err(CliError::Check("adapter file failed its CRC check".into()));
        }
    }
    match header.mode() {
        SaveMode::Full => {
            let a = io::load_adapter(&bytes, None)?;
            let (min, max, mean) = stats(a.z());
            println!(
                "z_r        min {min:e}  max {max:e}  mean {mean:e}  norm {:e}",
                norm2(a.z())
            );
            println!("rsm_fro    {:e}", a.residual().frobenius_norm());
        }
        SaveMode::Compact => println!("factors    not stored; merge needs the base matrix"),
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let corruption = match args.corrupt {
        CorruptArg::None => Corruption::None,
        CorruptArg::SignFlip => Corruption::SignFlip,
    };
    let report = gradcheck_suite(args.count, args.seed, corruption)?;
    if args.verbose {
        for c in &report.cases {
            println!(
                "{:<28} {:>3} x {:<3} r={:<3} max_rel_err {:.3e}",
                c.label, c.shape.0, c.shape.1, c.rank, c.max_rel_error
            );
        }
    }
    println!("cases          {}", report.cases.len());
    println!("max_rel_error  {:.3e}", report.max_rel_error);
    println!("tolerance      {:.0e}", report.tolerance);
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(CliError::Check(format!(
            "max relative error {:e} exceeds {:e}",
            report.max_rel_error, report.tolerance
        )))
    }
}

/// Loads a run config, applies `LOLDU_SEED` and `--output`, and returns it
/// with the resolved output directory.
fn load_config(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::parse(&text).map_err(CliError::Config)?;
    if let Ok(v) = std::env::var(SEED_ENV) {
        let seed = v.trim().parse().map_err(|_| {
            CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
        })?;
        cfg.override_seed(seed);
    }
    if let Some(out) = &args.output {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate().map_err(CliError::Config)?;
    let out = cfg.output_dir.clone().ok_or_else(|| {
        CliError::Config("no output directory: set output_dir or pass --output".into())
    })?;
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    write_file(
        &out.join("resolved_config.toml"),
        cfg.to_toml().map_err(CliError::Config)?,
    )?;
    Ok((cfg, out))
}

#[derive(Serialize)]
struct Timings {
    pretrain_s: f64,
    finetune_s: f64,
    total_s: f64,
}

fn train(args: RunArgs) -> Result<()> {
    let (cfg, out) = load_config(&args)?;
    let started = Instant::now();
    let task = SyntheticTask::generate(&cfg.task, cfg.seed);
    let pre = pretrain(&task, &cfg.model, &cfg.pretrain)?;
    let pretrain_s = started.elapsed().as_secs_f64();
    let ft_cfg = cfg.train.finetune_config();
    let outcome = finetune(
        &pre.model,
        &cfg.method,
        &task.finetune_train,
        &task.finetune_eval,
        &ft_cfg,
        cfg.seed,
    )?;
    let total_s = started.elapsed().as_secs_f64();

    let report = AblationReport {
        cells: vec![AblationCell {
            method: cfg.method.clone(),
            lr: cfg.train.lr,
        }],
        runs: vec![AblationRun {
            cell: 0,
            seed: cfg.seed,
            metrics: outcome.metrics.clone(),
        }],
        pretrained: vec![PretrainSummary {
            seed: cfg.seed,
            eval_loss: pre.eval.loss,
            eval_accuracy: pre.eval.accuracy,
        }],
    };
    io::write_metrics(&report.records(), &out)?;
    for (layer, adapter) in &outcome.loldu_adapters {
        write_file(
            &out.join(format!("adapters/layer{layer}.loldu")),
            io::save_adapter(adapter, SaveMode::Full),
        )?;
    }
    let timings = Timings {
        pretrain_s,
        finetune_s: total_s - pretrain_s,
        total_s,
    };
    write_file(
        &out.join("timings.json"),
        serde_json::to_string_pretty(&timings)?,
    )?;

    let m = &outcome.metrics;
    println!("method            {}", cfg.method.label());
    println!("pretrain_eval     {:e}", pre.eval.loss);
    println!(
        "eval_loss         {:e} -> {:e}",
        m.eval_loss[0],
        m.final_eval_loss()
    );
    if let Some(acc) = m.final_eval_accuracy() {
        println!("eval_accuracy     {acc}");
    }
    println!("trainable_params  {}", m.trainable_params);
    println!("diverged          {}", m.diverged);
    println!("merged_checksum   {:016x}", m.merged_checksum);
    println!("output            {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct CellSummary {
    cell: usize,
    label: String,
    median_final_eval_loss: f64,
    median_score: f64,
    diverged_runs: usize,
    runs: usize,
}

fn run_ablation(args: AblateArgs) -> Result<()> {
    let (cfg, out) = load_config(&args.run)?;
    let spec = cfg.ablation_spec();
    let started = Instant::now();
    let report = ablate(&spec, args.jobs)?;
    let total_s = started.elapsed().as_secs_f64();
    io::write_metrics(&report.records(), &out)?;

    let summary: Vec<CellSummary> = report
        .cells
        .iter()
        .enumerate()
        .map(|(i, cell)| CellSummary {
            cell: i,
            label: cell.label(),
            median_final_eval_loss: report.median_final_loss(i),
            median_score: report.median_score(i),
            diverged_runs: report.runs_for(i).filter(|r| r.metrics.diverged).count(),
            runs: report.runs_for(i).count(),
        })
        .collect();
    write_file(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    write_file(
        &out.join("timings.json"),
        serde_json::to_string_pretty(
            &serde_json::json!({ "total_s": total_s, "jobs": args.jobs }),
        )?,
    )?;

    println!(
        "{:<5} {:<55} {:>14} {:>9}",
        "cell", "method", "median_loss", "diverged"
    );
    for s in &summary {
        println!(
            "{:<5} {:<55} {:>14.6e} {:>5}/{}",
            s.cell, s.label, s.median_final_eval_loss, s.diverged_runs, s.runs
        );
    }
    println!(
        "{} cells x {} seeds -> {}",
        report.cells.len(),
        spec.seeds.len(),
        out.display()
    );
    Ok(())
}
