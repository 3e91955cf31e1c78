use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, warn};
use regmz_cli::config::{resolve, ExperimentConfig, Overrides, PresetName, Scale};
use regmz_cli::error::Result;
use regmz_cli::pipeline;

/// Regression-based Mori–Zwanzig operator learning.
#[derive(Parser)]
#[command(name = "regmz", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML), merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset; may also be given as `preset` in the config file.
    #[arg(long, value_enum)]
    preset: Option<PresetName>,
    #[arg(long, value_enum)]
    scale: Option<Scale>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite a non-empty output directory and ignore hash mismatches.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn resolve(&self, preset: Option<PresetName>) -> Result<ExperimentConfig> {
        resolve(
            self.config.as_deref(),
            Overrides {
                preset: preset.or(self.preset),
                scale: self.scale,
                seed: self.seed,
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate training and test data.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the operators of one model.
    Learn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Model tag from the configuration.
        #[arg(long)]
        model: String,
        #[arg(long)]
        memory_length: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a learned model from test histories.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
        /// Drop the memory terms and propagate with the first operator only.
        #[arg(long)]
        markov_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage of a preset.
    Reproduce {
        #[arg(value_enum, value_name = "PRESET")]
        name: PresetName,
        #[command(flatten)]
        common: Common,
        /// Defaults to runs/<preset>-<scale>-seed<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit code 3 when any rollout diverged.
fn diverged(n: usize) -> ExitCode {
    if n > 0 {
        warn!("{n} rollouts diverged; partial trajectories were written");
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { common, out } => {
            pipeline::generate(&common.resolve(None)?, &out, common.force)?;
        }
        Command::Learn {
            common,
            data,
            model,
            memory_length,
            out,
        } => {
            let o = pipeline::learn(
                &common.resolve(None)?,
                &data,
                &model,
                memory_length,
                &out,
                common.force,
            )?;
            println!(
                "{}: H = {}, profile below threshold from lag {}, selected memory length {}",
                o.tag,
                o.memory_length,
                o.profile_first_below
                    .map_or("none".into(), |v| v.to_string()),
                o.selected_memory_length
            );
        }
        Command::Predict {
            common,
            data,
            model_dir,
            markov_only,
            out,
        } => {
            let cfg = common.resolve(None)?;
            let s = pipeline::predict(&cfg, &data, &model_dir, &out, markov_only, common.force)?;
            return Ok(diverged(s.diverged()));
        }
        Command::Evaluate {
            common,
            predictions,
            out,
        } => {
            let r = pipeline::evaluate(&common.resolve(None)?, &predictions, &out, common.force)?;
            for (k, v) in &r.scalars {
                println!("{k} = {v}");
            }
        }
        Command::Reproduce { name, common, out } => {
            let cfg = common.resolve(Some(name))?;
            let out = out.unwrap_or_else(|| {
                Path::new("runs").join(format!(
                    "{}-{}-seed{}",
                    cfg.preset.as_str(),
                    cfg.scale.as_str(),
                    cfg.seed
                ))
            });
            let s = pipeline::reproduce(&cfg, &out, common.force)?;
            for (tag, m) in &s.models {
                let get = |k: &str| m.scalars.get(k).map_or("-".into(), |v| format!("{v:.4e}"));
                println!(
                    "{tag}: one_step_mse {} final_mse {} kl_long {}",
                    get("one_step_mse"),
                    get("final_mse"),
                    get("kl_long")
                );
            }
            println!("results in {}", out.display());
            return Ok(diverged(s.diverged_rollouts));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }
}
