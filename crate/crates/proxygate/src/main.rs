use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use proxygate::{cmd_check, cmd_eval, cmd_preset, cmd_sweep, cmd_train, CliError};

#[derive(Parser)]
#[command(
    name = "proxygate",
    version,
    about = "Train and evaluate token-gating proxy policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "PROXYGATE_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a proxy and write checkpoint, metrics and manifest
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against the always-accept and best-of-n baselines
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one proxy per grid cell
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient, selection-distribution and masking diagnostics
    Check {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write configs for the forbidden-token task
    Preset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, out } => {
            let m = cmd_train(&common.config, &out, common.seed, common.workers)?;
            println!("run {} written to {}", m.run_id, out.display());
            if let Some(r) = m.metrics.get("final_mean_reward") {
                println!("final batch mean reward {r}");
            }
        }
        Command::Eval {
            common,
            checkpoint,
            out,
        } => {
            let r = cmd_eval(
                &checkpoint,
                &common.config,
                &out,
                common.seed,
                common.workers,
            )?;
            println!("mean score {}", r.mean);
            println!("always-accept mean {}", r.baseline_mean);
            println!("win rate vs always-accept {}", r.win_rate);
            if let Some(b) = r.best_of_n_mean {
                println!("best-of-n mean {b}");
            }
        }
        Command::Sweep { common, grid, out } => {
            let (table, _) = cmd_sweep(&common.config, &grid, &out, common.seed, common.workers)?;
            print!("{}", table.to_csv());
        }
        Command::Check { config, seed } => {
            for line in cmd_check(&config, seed)?.lines() {
                println!("{line}");
            }
        }
        Command::Preset { out, seed } => {
            for p in cmd_preset(&out, seed)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
