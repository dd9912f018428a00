//! `wisteria`: generate synthetic data, train, evaluate and run experiment
//! sweeps from a JSON config.
//!
//! Exit codes: 0 on success, 1 for configuration errors, 2 for runtime or
//! numerical failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use wisteria_core::experiments::{
    eval_step, generate_step, render_markdown, run_protocol, train_step, write_protocol_output, ExperimentConfig,
    Protocol,
};
use wisteria_core::Error;

#[derive(Parser)]
#[command(name = "wisteria", version, about = "Weak supervision with multi-view agreement and ontology smoothing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset, its ontology, the operator views and the split.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run seed; defaults to the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a generated data directory; writes a checkpoint and loss trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out records of a data directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment protocol over all seeds and write its artifacts.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the protocol named in the config.
        #[arg(long, value_parser = ["main", "noise_sweep", "transfer", "ablation", "k_scaling"])]
        protocol: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render sweep summaries as markdown tables.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, protocol: Option<&str>) -> anyhow::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    Ok(match protocol {
        Some(p) => cfg.with_protocol(Protocol::parse(p)?)?,
        None => cfg,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let cfg = load_config(&config, None)?;
            let data = generate_step(&cfg, seed, &out)?;
            log::info!(
                "wrote {} records, {} views to {}",
                data.dataset.records.len(),
                data.views.num_views(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(&config, None)?;
            let outcome = train_step(&cfg, &data, &out)?;
            if let Some(last) = outcome.trace.last() {
                log::info!(
                    "final epoch: fit {:.4}, agreement {:.4}, graph {:.4}, total {:.4}",
                    last.fit,
                    last.agreement,
                    last.graph,
                    last.total
                );
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let report = eval_step(&checkpoint, &data, &out)?;
            for (name, m) in &report.metrics {
                println!("{name}\t{:.4}", m.mean);
            }
        }
        Command::Sweep { config, protocol, out } => {
            let cfg = load_config(&config, protocol.as_deref())?;
            let output = run_protocol(&cfg)?;
            write_protocol_output(&out, &output)?;
            for cell in &output.cells {
                let auroc = cell.report.mean("auroc").unwrap_or(f64::NAN);
                println!("{}\tauroc {auroc:.4}", cell.cell.name);
            }
        }
        Command::Report { input, out } => {
            let md = render_markdown(&input)?;
            fs::write(&out, md).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config_error() => 1,
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
