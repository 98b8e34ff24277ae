use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eqface::commands::{self, SplitOutputs, TrainOptions};
use eqface::config::{RunConfig, SEED_ENV};
use eqface::Result;

#[derive(Parser)]
#[command(name = "eqface", version, about = "Quality-aware embedding training, aggregation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable, last wins).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the training pipeline.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Train only the quality head of the `--init` checkpoint.
        #[arg(long, requires = "init")]
        quality_head_only: bool,
        /// Stop after Step 1.
        #[arg(long, conflicts_with = "quality_head_only")]
        baseline_only: bool,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Write features and qualities for every sample.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the reference side of an identity split.
        #[arg(long, requires = "query_out")]
        ref_out: Option<PathBuf>,
        /// Also write the query side of an identity split.
        #[arg(long, requires = "ref_out")]
        query_out: Option<PathBuf>,
    },
    /// Aggregate and score reference against query features.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        roc: Option<PathBuf>,
        /// none | mean | qwfa | qwfaf | progressive
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        f_th: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        s_th: Option<f64>,
    },
}

fn load_config(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &common.overrides {
        cfg.set_pair(pair)?;
    }
    for (key, value) in extra {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.with_seed_fallback(std::env::var(SEED_ENV).ok())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = load_config(&common, &[])?;
            let n = commands::cmd_gen(&cfg, &out, common.force)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train { common, data, out, iterations, quality_head_only, baseline_only, init } => {
            let cfg = load_config(&common, &[])?;
            let opts = TrainOptions { iterations, quality_head_only, baseline_only, init, force: common.force };
            let summary = commands::cmd_train(&cfg, &data, &out, &opts)?;
            let steps: Vec<String> = summary.steps.iter().map(ToString::to_string).collect();
            println!("steps: {}", steps.join(" -> "));
            println!("checkpoint: {}", out.display());
            println!("log: {}", summary.log.display());
        }
        Command::Extract { common, ckpt, data, out, ref_out, query_out } => {
            let cfg = load_config(&common, &[])?;
            let split = match (ref_out, query_out) {
                (Some(reference), Some(query)) => Some(SplitOutputs { reference, query }),
                _ => None,
            };
            let n = commands::cmd_extract(&cfg, &ckpt, &data, &out, split.as_ref(), common.force)?;
            println!("wrote {n} feature rows to {}", out.display());
        }
        Command::Eval { common, reference, query, out, roc, mode, f_th, s_th } => {
            let cfg = load_config(
                &common,
                &[
                    ("eval.mode", mode),
                    ("eval.f_th", f_th.map(|v| v.to_string())),
                    ("eval.s_th", s_th.map(|v| v.to_string())),
                ],
            )?;
            let report = commands::cmd_eval(&cfg, &reference, &query, &out, roc.as_deref(), common.force)?;
            for t in &report.tars {
                let note = if t.reliable { "" } else { " (too few impostor pairs; floor)" };
                println!("TAR@FAR={:e}: {:.6}{note}", t.far_target, t.tar);
            }
            for (n, acc) in &report.ranks {
                println!("rank-{n}: {acc:.6}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
