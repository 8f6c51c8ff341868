//! Command-line surface.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Algorithm, ExperimentConfig, SEED_ENV};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsTable;
use crate::runners;

#[derive(Debug, Parser)]
#[command(name = "rlhf-kernel", version, about = "Run small-scale RLHF experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed and the environment variable.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Supervised fine-tuning on chat JSONL.
    TrainSft(CommonArgs),
    /// Bradley-Terry reward model on preference JSONL.
    TrainRm(CommonArgs),
    /// Policy-gradient RLHF (ppo, grpo, rloo, gspo, cispo, rlvr).
    TrainRl(CommonArgs),
    /// Direct alignment (dpo, ipo, cdpo, dpo_nll).
    TrainDpo(CommonArgs),
    /// One round of best-of-n selection and fine-tuning.
    RejectSample(CommonArgs),
    /// Roll out CartPole or the thermostat.
    SimulateEnv(CommonArgs),
    /// Train/test reward-model over-optimization curves.
    Overopt(CommonArgs),
}

impl Command {
    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::TrainSft(a)
            | Command::TrainRm(a)
            | Command::TrainRl(a)
            | Command::TrainDpo(a)
            | Command::RejectSample(a)
            | Command::SimulateEnv(a)
            | Command::Overopt(a) => a,
        }
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Parse {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

fn load(args: &CommonArgs, fallback: Option<Algorithm>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&args.config)?;
    let env = std::env::var(SEED_ENV).ok();
    config.apply_seed_override(args.seed, env)?;
    if config.algorithm.is_none() {
        config.algorithm = fallback;
    }
    Ok(config)
}

/// Runs one subcommand and writes `config.json`, `metrics.csv` and
/// `model.json` under `--out`.
pub fn run(command: &Command) -> Result<()> {
    let args = command.common();
    let out = &args.out;
    let (config, metrics, model, extra): (ExperimentConfig, MetricsTable, serde_json::Value, Vec<(&str, String)>) =
        match command {
            Command::TrainSft(_) => {
                let c = load(args, Some(Algorithm::Sft))?;
                let o = runners::sft::run_sft(&c)?;
                (c, o.metrics, to_value(&o.policy.to_document())?, vec![])
            }
            Command::TrainRm(_) => {
                let c = load(args, Some(Algorithm::Rm))?;
                let o = runners::rm::run_rm(&c)?;
                (c, o.metrics, to_value(&o.model)?, vec![])
            }
            Command::TrainRl(_) => {
                let c = load(args, None)?;
                match c.algorithm {
                    Some(a) if a.is_rl() => {}
                    Some(a) => {
                        return Err(HarnessError::validation(
                            "algorithm",
                            format!("{} is not a policy-gradient algorithm", a.name()),
                        ))
                    }
                    None => return Err(HarnessError::validation("algorithm", "required for train-rl")),
                }
                let o = if c.pretrain_corpus.is_some() {
                    runners::rl::run_pretrain_mix(&c)?
                } else {
                    runners::rl::run_rlhf(&c)?
                };
                (c, o.metrics, to_value(&o.policy.to_document())?, vec![])
            }
            Command::TrainDpo(_) => {
                let c = load(args, Some(Algorithm::Dpo))?;
                let o = runners::dpo::run_dpo(&c)?;
                (c, o.metrics, to_value(&o.policy.to_document())?, vec![])
            }
            Command::RejectSample(_) => {
                let c = load(args, Some(Algorithm::RejectionSampling))?;
                let o = runners::reject::run_rejection_sampling(&c)?;
                let mut lines = String::new();
                for r in &o.selected {
                    lines.push_str(&serde_json::to_string(r).map_err(|e| HarnessError::Parse {
                        path: out.join("selected.jsonl"),
                        source: e,
                    })?);
                    lines.push('\n');
                }
                (
                    c,
                    o.metrics,
                    to_value(&o.policy.to_document())?,
                    vec![("selected.jsonl", lines)],
                )
            }
            Command::SimulateEnv(_) => {
                let c = load(args, None)?;
                let table = runners::env::run_simulation(&c)?;
                let env = to_value(&c.environment)?;
                (c, table, env, vec![])
            }
            Command::Overopt(_) => {
                let c = load(args, None)?;
                let o = runners::overopt::run_overoptimization(&c)?;
                let model = serde_json::json!({
                    "policy": to_value(&o.policy.to_document())?,
                    "train_rm": to_value(&o.train_rm)?,
                    "test_rm": to_value(&o.test_rm)?,
                });
                (c, o.metrics, model, vec![("kl_curve.csv", o.kl_curve.to_csv())])
            }
        };
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    write_json(&out.join("config.json"), &config)?;
    metrics.write(&out.join("metrics.csv"))?;
    write_json(&out.join("model.json"), &model)?;
    for (name, body) in extra {
        let path = out.join(name);
        fs::write(&path, body).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(())
}

fn to_value<S: Serialize>(v: &S) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| HarnessError::Parse {
        path: PathBuf::from("model.json"),
        source: e,
    })
}
