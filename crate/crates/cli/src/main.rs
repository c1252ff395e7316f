use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};

use mmkg::config::RunConfig;
use mmkg::run::{run, Command};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sub {
    Gen,
    TrainKgc,
    TrainEa,
    EvalKgc,
    EvalEa,
    Ablate,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Gen => Command::Gen,
            Sub::TrainKgc => Command::TrainKgc,
            Sub::TrainEa => Command::TrainEa,
            Sub::EvalKgc => Command::EvalKgc,
            Sub::EvalEa => Command::EvalEa,
            Sub::Ablate => Command::Ablate,
        }
    }
}

/// Multi-modal knowledge graph completion and entity alignment.
#[derive(Debug, Parser)]
#[command(name = "mmkg", version)]
struct Cli {
    #[arg(value_enum)]
    command: Sub,
    /// `section.key = value` config file; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `run.out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Enable probation-based iterative training for train-ea.
    #[arg(long)]
    iterative: bool,
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::parse("")?,
    };
    if let Ok(seed) = std::env::var("SNAG_SEED") {
        cfg.seed = seed
            .trim()
            .parse()
            .with_context(|| format!("SNAG_SEED = `{seed}` is not an unsigned integer"))?;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if cli.iterative {
        cfg.iterative = true;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load(&cli).and_then(|cfg| Ok(run(cli.command.into(), &cfg)?));
    match result {
        Ok(report) => {
            if let Some(m) = report.metrics {
                println!(
                    "MRR {:.4}  Hits@1 {:.4}  Hits@3 {:.4}  Hits@10 {:.4}",
                    m.mrr, m.hits1, m.hits3, m.hits10
                );
            }
            for f in report.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
