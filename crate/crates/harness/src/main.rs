use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psinet_harness::config::ExperimentConfig;
use psinet_harness::experiment::{diag_featuremap, run_experiment};
use psinet_harness::output::RESOLVED_CONFIG_FILE;
use psinet_harness::sweep::run_sweep;
use psinet_harness::HarnessError;

/// Federated Ψ-Net experiment runner.
///
/// Exit status: 0 success, 1 configuration error, 2 runtime error.
#[derive(Parser)]
#[command(name = "psinet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy of an experiment config.
    Run {
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a config once per value of one parameter.
    Sweep {
        config: PathBuf,
        /// Dotted field path, e.g. `mapping.shared_depth`.
        #[arg(long)]
        param: String,
        /// Comma-separated values, parsed as JSON where possible.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diagnostics on saved models.
    Diag {
        #[command(subcommand)]
        what: Diag,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
}

#[derive(Subcommand)]
enum Diag {
    /// Per-channel class preferences of one layer of a checkpoint.
    Featuremap {
        checkpoint: PathBuf,
        layer: usize,
        /// Defaults to the resolved config next to the checkpoint's run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "featuremap.csv")]
        out: PathBuf,
    },
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn default_config_for(ckpt: &Path) -> Result<PathBuf, HarnessError> {
    ckpt.parent()
        .and_then(Path::parent)
        .map(|run| run.join(RESOLVED_CONFIG_FILE))
        .filter(|p| p.exists())
        .ok_or_else(|| {
            HarnessError::Config(format!(
                "no {RESOLVED_CONFIG_FILE} found above {}; pass --config",
                ckpt.display()
            ))
        })
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load(&config, out)?;
            let summary = run_experiment(&cfg)?;
            for s in &summary.strategies {
                println!(
                    "{:<8} final accuracy {:.4}  loss {:.4}  uploaded {} bytes",
                    s.strategy.name(),
                    s.final_accuracy,
                    s.final_loss,
                    s.bytes_up_total
                );
            }
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let cfg = load(&config, out)?;
            let (path, rows) = run_sweep(&cfg, &param, &values)?;
            for r in &rows {
                println!("{}={} {:<8} {:.4}", r.param, r.value, r.strategy, r.final_accuracy);
            }
            println!("summary in {}", path.display());
        }
        Command::Diag {
            what:
                Diag::Featuremap {
                    checkpoint,
                    layer,
                    config,
                    out,
                },
        } => {
            let config = match config {
                Some(c) => c,
                None => default_config_for(&checkpoint)?,
            };
            let cfg = ExperimentConfig::load(&config)?;
            let rows = diag_featuremap(&cfg, &checkpoint, layer, &out)?;
            println!("{rows} channels written to {}", out.display());
        }
        Command::Validate { config } => {
            ExperimentConfig::load(&config)?.validate()?;
            println!("{} is valid", config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
