//! Experiment harness binding the control stack: config-driven training,
//! figure-level experiment reproduction, and CSV artifact export.

use clap::{Parser, Subcommand};
use neuroctl_cli::commands::{run_export, run_train};
use neuroctl_cli::common::{append_sidecar_log, CliError};
use neuroctl_cli::config::ExperimentConfig;
use neuroctl_cli::experiments;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "neuroctl", version, about = "Hierarchical neuromorphic control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate demonstrations and train a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the training seed and the experiment seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named experiment protocol and write metrics plus raw CSVs.
    Experiment {
        /// One of: smoothing, sparsity, decoupling, multistep, reflex,
        /// rhythm, systolic, attention.
        name: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export CSV artifacts from a checkpoint.
    Export {
        /// One of: activity, attention, kinematic_map.
        artifact: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(
    path: Option<&PathBuf>,
    seed: Option<u64>,
    experiment: Option<&str>,
) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_path(p).map_err(CliError::Config)?,
        None => ExperimentConfig::defaults_for(experiment.unwrap_or("")),
    };
    if let Some(s) = seed {
        cfg.trainer.seed = s;
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load_config(Some(&config), seed, None)?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            append_sidecar_log(&out_dir, "train");
            let doc = run_train(&cfg, &out_dir)?;
            println!(
                "train: final loss {:.6e} -> {}",
                doc.metrics["final_loss"].as_f64().unwrap_or(f64::NAN),
                out_dir.display()
            );
            Ok(())
        }
        Command::Experiment {
            name,
            config,
            checkpoint,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_ref(), seed, Some(&name))?;
            let out_dir = out
                .unwrap_or_else(|| PathBuf::from(&cfg.out_dir))
                .join(&name);
            let doc = experiments::run(&name, &cfg, checkpoint.as_deref(), &out_dir)?;
            append_sidecar_log(&out_dir, &format!("experiment {name}"));
            println!(
                "{}: {} -> {}",
                doc.experiment,
                if doc.pass { "PASS" } else { "FAIL" },
                out_dir.display()
            );
            Ok(())
        }
        Command::Export {
            artifact,
            checkpoint,
            config,
            out,
        } => {
            let cfg = load_config(config.as_ref(), None, None)?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            run_export(&artifact, checkpoint.as_deref(), &cfg, &out_dir)?;
            append_sidecar_log(&out_dir, &format!("export {artifact}"));
            println!("export {artifact} -> {}", out_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("neuroctl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
