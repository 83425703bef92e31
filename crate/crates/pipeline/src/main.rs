use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dtmdp_pipeline::{Pipeline, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(
    name = "dtmdp",
    about = "Offline policy learning and context-engineering evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[arg(long, global = true, default_value = "configs/demo.toml")]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the artifacts directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a base-agent trajectory corpus in the simulator.
    Collect,
    Abstract,
    TrainReward,
    Relabel,
    TrainPolicy,
    Rank,
    Simulate,
    Evaluate,
    /// Initial-value scores across expert-trajectory counts.
    Robustness,
    Reproduce,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = PipelineConfig::load(&cli.config)?;
    let p = Pipeline::new(cfg, cli.seed, cli.out)?;
    match cli.command {
        Command::Collect => p.collect().map(drop),
        Command::Abstract => p.abstract_stage().map(drop),
        Command::TrainReward => p.train_reward_stage().map(drop),
        Command::Relabel => p.relabel_stage().map(drop),
        Command::TrainPolicy => p.train_policy_stage().map(drop),
        Command::Rank => p.rank_stage().map(drop),
        Command::Simulate => p.simulate_stage().map(drop),
        Command::Evaluate => p.evaluate_stage().map(drop),
        Command::Robustness => p.robustness_stage().map(drop),
        Command::Reproduce => {
            let s = p.reproduce()?;
            println!(
                "{:<16} {:>8} {:>8} {:>8} {:>10} {:>10}",
                "arm", "recall", "f1", "rank", "p_adj", "explored"
            );
            for a in &s.evaluation.arms {
                println!(
                    "{:<16} {:>8.3} {:>8.3} {:>8.3} {:>10} {:>10.2}",
                    a.arm,
                    a.recall_mean,
                    a.f1_mean,
                    a.avg_rank,
                    a.p_adjusted.map_or("-".into(), |p| format!("{p:.2e}")),
                    a.mean_entities_explored
                );
            }
            if let Some(r) = &s.robustness {
                println!(
                    "initial-value range: rl-irl {:.4}, bc {:.4}",
                    r.rl_irl_range, r.bc_range
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
