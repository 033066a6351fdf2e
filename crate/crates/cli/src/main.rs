use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use groupact_cli::commands::{cmd_ablate, cmd_eval, cmd_gen, cmd_gradcheck, cmd_oracle, cmd_train, CHECKPOINT_FILE};
use groupact_cli::config::ExperimentConfig;

/// Log verbosity is read from `GROUPACT_LOG` (e.g. `info`, `debug`).
#[derive(Parser)]
#[command(name = "groupact", version, about = "Group activity detection experiments")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
    /// Parallel dataset generation and evaluation.
    #[arg(long, global = true)]
    parallel: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and eval datasets.
    Gen,
    /// Train, checkpoint and evaluate on the eval split.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        /// Defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Component and fusion-variant comparison over the seed list.
    Ablate,
    /// Finite-difference gradient checks.
    Gradcheck,
    /// Assignment and metric oracles.
    Oracle,
}

fn run(cli: Cli) -> groupact::Result<bool> {
    let mut overrides = cli.set;
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out={:?}", o.display().to_string()));
    }
    if cli.parallel {
        overrides.push("parallel=true".into());
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Gen => {
            let s = cmd_gen(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Train { resume } => {
            let r = cmd_train(&cfg, resume.as_deref())?;
            println!("trained {} steps; outputs in {}", r.steps, cfg.out_dir().display());
            if let Some(rep) = r.report {
                println!("{}\n{}", rep.csv_header(), rep.csv_row());
            }
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| cfg.out_dir().join(CHECKPOINT_FILE));
            let rep = cmd_eval(&cfg, &path)?;
            println!("{}\n{}", rep.csv_header(), rep.csv_row());
        }
        Command::Ablate => {
            let p = cmd_ablate(&cfg)?;
            println!("wrote {}", p.display());
        }
        Command::Gradcheck => return cmd_gradcheck(&cfg),
        Command::Oracle => return cmd_oracle(&cfg),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GROUPACT_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
