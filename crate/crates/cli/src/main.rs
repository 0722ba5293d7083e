//! `rlcs`: data generation, staged training, evaluation and the experiment
//! suite. Errors print as `error[<category>]: <message>` on stderr and exit
//! with a category-specific code.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rlcs_core::config::ExperimentConfig;
use rlcs_core::harness::{self, EvalTarget, Stage};
use rlcs_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rlcs", version, about = "Generative reward model and story policy training at desk scale")]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the human, SFT, RL and eval datasets plus a manifest.
    GenData,
    /// Train one stage from its upstream artifacts.
    Train {
        /// genrm_sft, genrm_grpo, story_sft or story_rl
        #[arg(long)]
        stage: Stage,
    },
    /// Evaluate a checkpoint (or a reference judge) on the eval split.
    Eval {
        /// A stage name, or one of coin, always_first, oracle.
        #[arg(long)]
        target: EvalTarget,
        /// Second target evaluated on the same records; adds a paired delta.
        #[arg(long)]
        baseline: Option<EvalTarget>,
    },
    /// Final GenRM accuracy for each rollout group size.
    SweepRollout {
        /// Comma-separated group sizes; defaults to the config.
        #[arg(long, value_delimiter = ',')]
        group_sizes: Option<Vec<usize>>,
    },
    /// Shaped against uniform reward weights over several seeds.
    AblateShaping {
        /// Comma-separated seeds; defaults to the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn exit_code(category: &str) -> u8 {
    match category {
        "invalid-input" => 10,
        "numeric" => 11,
        "config" => 12,
        "stage-dependency" => 13,
        "hash-mismatch" => 14,
        "parse" => 15,
        "io" => 16,
        _ => 1,
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn run(cli: &Cli) -> Result<()> {
    let config = resolve(cli)?;
    match &cli.command {
        Command::GenData => {
            let manifest = harness::cmd_gen_data(&config)?;
            println!("{}", json(&manifest));
        }
        Command::Train { stage } => {
            let summary = harness::cmd_train(&config, *stage)?;
            println!("{}", json(&summary));
        }
        Command::Eval { target, baseline } => {
            let report = harness::cmd_eval(&config, *target, *baseline)?;
            println!("{}", json(&report));
        }
        Command::SweepRollout { group_sizes } => {
            let sizes = group_sizes.as_ref().unwrap_or(&config.experiments.sweep_group_sizes);
            let out = harness::cmd_sweep_rollout(&config, sizes)?;
            println!("group_size  seed  sft_accuracy  final_accuracy  wall_clock_s");
            for (r, (_, secs)) in out.rows.iter().zip(&out.seconds) {
                println!(
                    "{:>10}  {:>4}  {:>12.4}  {:>14.4}  {:>12.2}",
                    r.group_size, r.seed, r.sft_accuracy, r.final_accuracy, secs
                );
            }
        }
        Command::AblateShaping { seeds } => {
            let seeds = seeds.as_ref().unwrap_or(&config.experiments.ablation_seeds);
            let summary = harness::cmd_ablate_shaping(&config, seeds)?;
            println!("{}", json(&summary));
        }
        Command::ShowConfig => print!("{}", config.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(exit_code(e.category()))
        }
    }
}

fn report(e: &Error) {
    eprintln!("error[{}]: {e}", e.category());
}
