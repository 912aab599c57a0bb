use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distl_cli::config::ExperimentConfig;
use distl_cli::data::parse_split;
use distl_cli::error::{CliError, CliResult, EXIT_RUNTIME};
use distl_cli::{
    cmd_eval, cmd_localize, cmd_partition, cmd_pretrain, cmd_run, cmd_synth, summarize, LocalizeOptions, RunPaths,
    SynthOptions,
};
use distl_core::par::Execution;

/// Self-evolving teacher-student distillation experiments.
#[derive(Debug, Parser)]
#[command(name = "distl", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Restrict to one seed (default: every seed in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; overrides $DISTL_OUT and the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split the manifest into the labeled set and unlabeled folds.
    Partition,
    /// Multi-label pretraining from data.pretrain_manifest.
    Pretrain,
    /// Train (or resume) generations 0..=t_max.
    Run,
    /// Evaluate every completed generation and render plots.
    Eval,
    /// Attention dice against reference masks.
    Localize(LocalizeArgs),
    /// Re-render plots from existing metrics files.
    Plot,
    /// Write a synthetic dataset to --out.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct LocalizeArgs {
    /// Checkpoint to score (default: last completed generation).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "internal_val")]
    split: String,
    #[arg(long, default_value_t = 20)]
    limit: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    extra_classes: usize,
    #[arg(long, default_value_t = 150)]
    extra_per_class: usize,
    #[arg(long, default_value_t = 1000)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    val_per_class: usize,
    #[arg(long, default_value_t = 150)]
    external_per_class: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long)]
    difficulty: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pretrain_samples: usize,
}

fn load_config(cli: &Cli) -> CliResult<(ExperimentConfig, PathBuf, Vec<u64>)> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::usage("this command needs --config"))?;
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    let seeds = match cli.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    let out = cfg.resolve_out(cli.out.as_deref());
    Ok((cfg, out, seeds))
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => {
            let out = cli
                .out
                .as_deref()
                .ok_or_else(|| CliError::usage("synth needs --out"))?;
            let defaults = SynthOptions::default();
            let opts = SynthOptions {
                classes: a.classes,
                extra_classes: a.extra_classes,
                extra_per_class: a.extra_per_class,
                train_per_class: a.train_per_class,
                val_per_class: a.val_per_class,
                external_per_class: a.external_per_class,
                side: a.side,
                difficulty: a.difficulty.unwrap_or(defaults.difficulty),
                pretrain_samples: a.pretrain_samples,
                seed: cli.seed.unwrap_or(0),
                ..defaults
            };
            let written = cmd_synth(&opts, out, Execution::Parallel)?;
            println!("wrote {} records to {}", written.records, written.manifest.display());
            Ok(())
        }
        Command::Partition => {
            let (cfg, out, seeds) = load_config(cli)?;
            for seed in seeds {
                let p = cmd_partition(&cfg, &out, seed)?;
                println!(
                    "seed {seed}: {} labeled, folds {:?} -> {}",
                    p.labeled.len(),
                    p.folds.iter().map(Vec::len).collect::<Vec<_>>(),
                    RunPaths::new(&out, seed).partition_dir().display()
                );
            }
            Ok(())
        }
        Command::Pretrain => {
            let (cfg, out, seeds) = load_config(cli)?;
            for seed in seeds {
                cmd_pretrain(&cfg, &out, seed)?;
                println!("seed {seed}: {}", RunPaths::new(&out, seed).pretrain_checkpoint().display());
            }
            Ok(())
        }
        Command::Run => {
            let (cfg, out, seeds) = load_config(cli)?;
            for seed in seeds {
                let ledger = cmd_run(&cfg, &out, seed)?;
                println!("seed {seed}: {} generations complete", ledger.completed().len());
            }
            Ok(())
        }
        Command::Eval => {
            let (cfg, out, seeds) = load_config(cli)?;
            let mut missing = Vec::new();
            for &seed in &seeds {
                let o = cmd_eval(&cfg, &out, seed)?;
                println!("seed {seed}: evaluated generations {:?}", o.evaluated);
                missing.extend(o.missing.into_iter().map(|g| (seed, g)));
            }
            for s in summarize(&out, &seeds)? {
                if let Some(m) = s.median_auc {
                    println!("{} T={}: median AUC {m:.4}", s.split, s.generation);
                }
            }
            if missing.is_empty() {
                Ok(())
            } else {
                Err(CliError::runtime(format!("missing checkpoints (seed, generation): {missing:?}")))
            }
        }
        Command::Localize(a) => {
            let (cfg, out, seeds) = load_config(cli)?;
            let opts = LocalizeOptions {
                split: parse_split(&a.split)?,
                limit: a.limit,
                checkpoint: a.checkpoint.clone(),
            };
            for seed in seeds {
                let r = cmd_localize(&cfg, &out, seed, &opts)?;
                println!(
                    "seed {seed}: n={} mean dice {:.3} (std {:.3}), random baseline {:.3}",
                    r.n, r.mean_dice, r.std_dice, r.random_baseline.mean_dice
                );
            }
            Ok(())
        }
        Command::Plot => {
            let (_, out, seeds) = load_config(cli)?;
            for seed in seeds {
                distl_cli::plot::render_run(&RunPaths::new(&out, seed))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(EXIT_RUNTIME as u8))
        }
    }
}
