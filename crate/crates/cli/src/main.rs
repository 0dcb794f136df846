use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flic_core::datagen::generate;
use flic_core::experiment::{
    evaluate_checkpoint, onboard_command, parse_config, parse_config_str, run_command, write_dataset, ExperimentConfig,
    Mode,
};
use flic_core::FlicError;

/// Personalized federated learning over heterogeneous feature spaces.
#[derive(Parser)]
#[command(name = "flic", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bound on concurrent client workers.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy dataset described by the config.
    Datagen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write metrics, summary, message log and checkpoint.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// flic | local | theory; overrides the config.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Run the linear-regression convergence harness.
    Theory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit a client against a frozen checkpoint.
    Onboard {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        client: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, FlicError> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => parse_config_str("", std::env::vars())?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_mode(common: &Common, out: &Path, mode: Option<Mode>) -> Result<(), FlicError> {
    let mut cfg = load_config(common)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let summary = run_command(&cfg, out)?;
    if let Some(acc) = summary.mean_accuracy {
        println!("mean accuracy {acc:.4} over {} clients", summary.clients);
    }
    if let Some(row) = summary.final_trace {
        println!("round {} dist {:.3e} mse {:.3e}", row.round, row.dist, row.mse);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), FlicError> {
    match cli.command {
        Command::Datagen { common, out } => {
            let cfg = load_config(&common)?;
            let spec = cfg.dataset_spec();
            let clients = generate(&spec)?;
            write_dataset(&out, &clients, cfg.num_classes, Some(&spec))?;
            println!("wrote {} clients to {}", clients.len(), out.display());
            Ok(())
        }
        Command::Run { common, out, mode } => {
            let mode = mode.map(|m| m.parse()).transpose()?;
            run_mode(&common, &out, mode)
        }
        Command::Theory { common, out } => run_mode(&common, &out, Some(Mode::Theory)),
        Command::Eval { checkpoint, data } => {
            let eval = evaluate_checkpoint(&checkpoint, &data)?;
            for (i, a) in eval.per_client.iter().enumerate() {
                println!("client {i} accuracy {a:.4}");
            }
            println!("mean accuracy {:.4}", eval.mean);
            Ok(())
        }
        Command::Onboard {
            common,
            checkpoint,
            data,
            client,
        } => {
            let cfg = load_config(&common)?;
            let report = onboard_command(&cfg, &checkpoint, &data, client)?;
            println!("client {} onboarded in {} steps: accuracy {:.4}", report.client, report.steps, report.accuracy);
            if let Some(r) = report.reference_accuracy {
                println!("checkpoint accuracy for this client {r:.4}");
            }
            Ok(())
        }
    }
}

fn exit_code(e: &FlicError) -> u8 {
    match e {
        FlicError::Config { .. } => 2,
        FlicError::Divergence { .. } => 3,
        FlicError::Io { .. } | FlicError::Format { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
