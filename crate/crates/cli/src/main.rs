use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use segprune::config::RunConfig;
use segprune::data::{gen_data, generate, load_dataset, Dataset};
use segprune::dump::dump_attention;
use segprune::exec::Exec;
use segprune::metrics::MetricSet;
use segprune::model::Model;
use segprune::pruning::{flops_psa, flops_sa, pruned_head_mults, FlopReport, FlopsMode};
use segprune::train::{evaluate, history_csv, load_params, save_checkpoint, train, TrainOptions};

#[derive(Parser)]
#[command(name = "segprune", version, about = "Pruned transformer segmentation on synthetic shapes")]
struct Cli {
    /// Run configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides both `train.seed` and `data.seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset into the output directory.
    GenData,
    /// Train and write `checkpoint/` and `history.csv` under the output directory.
    Train(DataArg),
    /// Print pooled metrics of a checkpoint on one split.
    Eval(EvalArgs),
    /// Write attention and mask images for one sample.
    DumpAttn(DumpArgs),
    /// Print the FLOP report row for one attention head.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory from `gen-data`; generated in memory from the config when omitted.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArg,
    /// Checkpoint directory (default: `<out>/checkpoint`).
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Sample index within the split.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    n: u64,
    #[arg(long)]
    d: u64,
    #[arg(long)]
    dm: u64,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value = "kept-fraction")]
    mode: FlopsMode,
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
    }
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>, exec: Exec) -> Result<Dataset> {
    Ok(match dir {
        Some(d) => load_dataset(d).with_context(|| format!("loading dataset from {}", d.display()))?,
        None => Dataset::split(generate(&cfg.data, exec)?),
    })
}

fn checkpoint(cli: &Cli, args: &EvalArgs) -> Result<(RunConfig, Model)> {
    let dir = args.checkpoint.clone().unwrap_or_else(|| cli.out.join("checkpoint"));
    let path = dir.join("config.cfg");
    let mut cfg = RunConfig::load(&path)?;
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
    }
    let model = load_params(&dir, cfg.model.clone()).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok((cfg, model))
}

fn flops_report(a: &FlopsArgs) -> Result<FlopReport> {
    if a.n == 0 || a.d == 0 || a.dm == 0 {
        bail!("--n, --d and --dm must be positive");
    }
    if !(0.0..=1.0).contains(&a.alpha) || !(0.0..=1.0).contains(&a.lambda) {
        bail!("--alpha and --lambda must lie in [0, 1]");
    }
    // multiply count of a decision with these rates, rounded to whole rows and entries
    let kept = ((1.0 - a.alpha) * a.n as f64).round() as u64;
    let nnz = ((1.0 - a.lambda) * (kept * a.n) as f64).round() as u64;
    Ok(FlopReport {
        n: a.n as usize,
        d: a.d as usize,
        d_m: a.dm as usize,
        alpha: a.alpha,
        lambda: a.lambda,
        omega_sa: flops_sa(a.n, a.d, a.dm),
        omega_psa_formula: flops_psa(a.n, a.d, a.dm, a.alpha, a.lambda, a.mode),
        omega_psa_measured: pruned_head_mults(a.n, a.d, a.dm, kept, nnz),
    })
}

fn run(cli: &Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match &cli.cmd {
        Cmd::GenData => {
            let cfg = run_config(cli)?;
            let ds = gen_data(&cfg.data, &cli.out, exec)?;
            println!("train={} val={} test={} dir={}", ds.train.len(), ds.val.len(), ds.test.len(), cli.out.display());
        }
        Cmd::Train(args) => {
            let cfg = run_config(cli)?;
            let ds = dataset(&cfg, args.data.as_deref(), exec)?;
            let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            let opts = TrainOptions {
                exec,
                dump_dir: Some(cli.out.join("nonfinite")),
            };
            let history = train(&mut model, &ds.train, &cfg.train, &opts)?;
            fs::create_dir_all(&cli.out)?;
            let csv = history_csv(&history);
            fs::write(cli.out.join("history.csv"), &csv)?;
            save_checkpoint(&cli.out.join("checkpoint"), &model, &cfg.to_text())?;
            if let Some(last) = csv.lines().last() {
                println!("{}", csv.lines().next().unwrap_or_default());
                println!("{last}");
            }
        }
        Cmd::Eval(args) => {
            let (cfg, model) = checkpoint(cli, args)?;
            let ds = dataset(&cfg, args.data.data.as_deref(), exec)?;
            let m = evaluate(&model, ds.get(&args.split)?, exec)?;
            println!("{}", MetricSet::CSV_HEADER);
            println!("{}", m.to_csv_row());
        }
        Cmd::DumpAttn(args) => {
            let (cfg, model) = checkpoint(cli, &args.eval)?;
            let ds = dataset(&cfg, args.eval.data.data.as_deref(), exec)?;
            let split = ds.get(&args.eval.split)?;
            let Some(sample) = split.get(args.index) else {
                bail!("--index {} out of range for {} samples", args.index, split.len());
            };
            let files = dump_attention(&model, &sample.image, &cli.out)?;
            println!("wrote {} images to {}", files.len(), cli.out.display());
        }
        Cmd::Flops(args) => {
            let rep = flops_report(args)?;
            println!("{}", FlopReport::CSV_HEADER);
            println!("{}", rep.to_csv_row());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
