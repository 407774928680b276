use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tima_core::harness::Variant;
use tima_lab::{parse_config, Pipeline, RunConfig};

/// Adversarial fine-tuning experiments on a toy dual encoder.
#[derive(Parser)]
#[command(name = "tima", version)]
struct Cli {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config fine-tuning variant.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, test and shifted probe splits.
    GenData,
    /// Clean pretraining of the teacher.
    Pretrain,
    /// Adversarial fine-tuning of the selected variant.
    Finetune,
    /// Evaluate the selected variant and write its report and matrices.
    Eval,
    /// Write similarity matrices for the selected variant.
    ExportMatrices,
    /// Fine-tune and evaluate over the configured (m, eta, eps) grid.
    Sweep,
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_config(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(variant) = cli.variant {
        cfg.finetune.variant = variant;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let pipeline = Pipeline::new(load(cli)?);
    let root = pipeline.root().display().to_string();
    match cli.command {
        Command::GenData => {
            let s = pipeline.gen_data()?;
            println!(
                "{root}/data: {} train, {} test, {} probe",
                s.train.len(),
                s.test.len(),
                s.probe.len()
            );
        }
        Command::Pretrain => {
            pipeline.pretrain()?;
            println!("{root}/models/teacher.timm");
        }
        Command::Finetune => {
            pipeline.finetune()?;
            println!("{root}/models/{}.timm", pipeline.config().finetune.variant);
        }
        Command::Eval => {
            let r = pipeline.eval()?;
            println!("{root}/reports/{}.json", r.variant);
            println!("clean {}", r.clean_accuracy);
            for (eps, acc) in &r.robust_accuracy.0 {
                println!("robust@{eps} {acc}");
            }
        }
        Command::ExportMatrices => {
            for f in pipeline.export_matrices()? {
                println!("{root}/{}", f.csv);
            }
        }
        Command::Sweep => {
            for (path, r) in pipeline.sweep()? {
                println!("{root}/{path} clean {}", r.clean_accuracy);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
