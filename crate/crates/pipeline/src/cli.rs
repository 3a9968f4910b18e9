//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use goalcast_core::envsim::{build_dataset, mix_seed};
use goalcast_core::Exec;

use crate::config::RunConfig;
use crate::data::write_manifest;
use crate::error::{PipelineError, Result};
use crate::evaluate::run_evaluation;
use crate::layout::Layout;
use crate::significance::{compare, MethodInput, Rope};
use crate::train::{Stage, Trainer};
use crate::visual;

#[derive(Debug, Parser)]
#[command(name = "goalcast", version, about = "Goal-conditioned trajectory forecasting on simulated floor plans")]
pub struct Cli {
    /// Config file, or one of the built-in profiles: desk, smoke, full.
    #[arg(long, global = true, default_value = "desk")]
    pub config: String,
    /// Overrides the dataset, training and evaluation seeds with values
    /// derived from this one. Pass the same value to every subcommand.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root: data/, checkpoints/, logs/, eval/, stats/.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct AblationArgs {
    /// without_sg_net, without_micro or without_ll_prior; repeatable.
    #[arg(long = "ablation")]
    pub ablation: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate environments and walker scenes into <out>/data.
    Simulate,
    /// Train one stage or the whole chain.
    Train {
        #[arg(long, default_value = "all", value_parser = ["pretrain", "lg", "sg", "micro", "all"])]
        stage: String,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Sample K forecasts per test scene and write metric reports.
    Evaluate {
        /// Sample counts; defaults to the config's eval.k list.
        #[arg(long, num_args = 1..)]
        k: Vec<usize>,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Friedman/Nemenyi and Bayesian signed-rank tests over metric CSVs.
    Stats {
        /// ade, fde, nll or ecfl.
        #[arg(long)]
        metric: String,
        /// ROPE half-width, or `auto` for the metric's default.
        #[arg(long, default_value = "auto")]
        rope: Rope,
        /// Metric CSVs, one per method, as `path` or `label=path`.
        #[arg(long, num_args = 2.., required = true)]
        inputs: Vec<String>,
    },
    /// Render forecast overlays as PNG.
    Plot {
        /// Test scene id; defaults to the first `count` test scenes.
        #[arg(long)]
        scene: Option<String>,
        /// Number of test scenes when no scene is given.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Forecasts drawn per scene.
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Output directory; defaults to <out>/eval/<tag>/plots.
        #[arg(long)]
        dest: Option<PathBuf>,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Dump a scene's heatmap stack as PGM files.
    Inspect {
        /// Scene id; defaults to the first test scene.
        #[arg(long)]
        scene: Option<String>,
        /// Output directory; defaults to <out>/inspect.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

fn configure(cli: &Cli, ablation: &AblationArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = mix_seed(&[seed, 1]);
        cfg.eval.seed = mix_seed(&[seed, 2]);
    }
    for name in &ablation.ablation {
        cfg.ablation.enable(name)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Executes a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let exec = Exec::default();
    match &cli.command {
        Command::Simulate => {
            let cfg = configure(cli, &AblationArgs::default())?;
            let dir = Layout::new(&cli.out, &cfg).data_dir();
            let dcfg = cfg.dataset_config();
            let summary = build_dataset(&dcfg, &dir, exec)?;
            write_manifest(&dir, &dcfg)?;
            println!(
                "{} environments, {} records (train/val/test {:?}) in {}",
                summary.environments,
                summary.records,
                summary.records_per_split,
                dir.display()
            );
        }
        Command::Train { stage, ablation } => {
            let cfg = configure(cli, ablation)?;
            let trainer = Trainer::new(&cfg, &cli.out, exec)?;
            let which = if stage == "all" { None } else { Stage::parse(stage) };
            for outcome in trainer.run(which)? {
                let last = outcome.log.last().and_then(|r| r.get("loss")).cloned().unwrap_or_default();
                println!("{}: final loss {last}, checkpoint sha256 {}", outcome.stage.name(), outcome.checkpoint_hash);
            }
        }
        Command::Evaluate { k, ablation } => {
            let cfg = configure(cli, ablation)?;
            let ks = if k.is_empty() { cfg.eval.k.clone() } else { k.clone() };
            for k in ks {
                let (report, record) = run_evaluation(&cfg, &cli.out, k, exec)?;
                let a = &report.aggregate;
                println!(
                    "[{}] K={k}: minADE {:.4} minFDE {:.4} KDE-NLL {:.4} ECFL {:.2} over {} scenes -> {}",
                    record.tag,
                    a.min_ade,
                    a.min_fde,
                    a.kde_nll,
                    a.ecfl,
                    report.scenes.len(),
                    record.metrics_csv.display()
                );
            }
        }
        Command::Stats { metric, rope, inputs } => {
            let cfg = configure(cli, &AblationArgs::default())?;
            let inputs: Vec<MethodInput> = inputs.iter().map(|s| MethodInput::parse(s)).collect();
            let report = compare(&inputs, metric, *rope, cfg.dataset.units, cfg.eval.seed, exec)?;
            let text = serde_json::to_string_pretty(&report).expect("serialises");
            let dir = Layout::new(&cli.out, &cfg).stats_dir();
            std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
            let path = dir.join(format!("{}.json", report.metric));
            std::fs::write(&path, &text).map_err(|e| PipelineError::io(&path, e))?;
            println!("{text}");
        }
        Command::Plot { scene, count, k, dest, ablation } => {
            let cfg = configure(cli, ablation)?;
            let layout = Layout::new(&cli.out, &cfg);
            let dest = dest.clone().unwrap_or_else(|| layout.eval_dir().join("plots"));
            for p in visual::plot(&cfg, &cli.out, scene.as_deref(), *count, (*k).max(1), &dest)? {
                println!("{}", p.display());
            }
        }
        Command::Inspect { scene, dest } => {
            let cfg = configure(cli, &AblationArgs::default())?;
            let dest = dest.clone().unwrap_or_else(|| cli.out.join("inspect"));
            for p in visual::inspect(&cfg, &cli.out, scene.as_deref(), &dest)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["goalcast", "--bogus", "simulate"]), 1);
        assert_eq!(run(["goalcast", "train", "--stage", "nope"]), 1);
        assert_eq!(run(["goalcast"]), 1);
        assert_eq!(run(["goalcast", "--help"]), 0);
    }

    #[test]
    fn evaluate_without_checkpoints_exits_three() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["goalcast", "--config", "smoke", "--out", out, "evaluate", "--k", "2"]), 3);
    }

    #[test]
    fn unknown_ablation_and_missing_config_are_usage_or_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["goalcast", "--out", out, "evaluate", "--ablation", "without_everything"]), 1);
        assert_eq!(run(["goalcast", "--config", "/nonexistent.toml", "simulate"]), 2);
    }

    #[test]
    fn seed_override_moves_all_three_seeds() {
        let cli = Cli::try_parse_from(["goalcast", "--config", "smoke", "--seed", "7", "simulate"]).unwrap();
        let cfg = configure(&cli, &AblationArgs::default()).unwrap();
        assert_eq!(cfg.dataset.seed, 7);
        assert_ne!(cfg.train.seed, RunConfig::preset("smoke").unwrap().train.seed);
    }
}
