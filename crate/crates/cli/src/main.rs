use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mulcpred_cli::commands::{
    self, EvaluateConfig, ExplainConfig, GenerateConfig, MorfConfig, PruneConfig, ServeConfig, TrainCommand,
};
use mulcpred_cli::{config, CliResult};

#[derive(Parser)]
#[command(
    name = "mulcpred",
    version,
    about = "Train, explain and evaluate concept-based multi-modal classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenerateData(Common),
    /// Train a model and write a checkpoint.
    Train(Common),
    /// Compute accuracy, AUC and F1 on one or more datasets.
    Evaluate(Common),
    /// Export a concept bundle with top samples and heatmaps.
    Explain(Common),
    /// Compute extended MoRF curves and areas.
    Morf(Common),
    /// Write a copy of a checkpoint with pruned concepts.
    Prune(Common),
    /// Serve models, bundles and metrics over HTTP on localhost.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        port: Option<u16>,
    },
}

fn print(value: serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(&value).expect("json value");
    // a closed pipe (e.g. `| head`) is not an error
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenerateData(c) => print(commands::generate_data(&config::load::<GenerateConfig>(
            c.config.as_deref(),
            &c.sets,
        )?)?),
        Command::Train(c) => print(commands::train_model(&config::load::<TrainCommand>(
            c.config.as_deref(),
            &c.sets,
        )?)?),
        Command::Evaluate(c) => print(commands::evaluate(&config::load::<EvaluateConfig>(
            c.config.as_deref(),
            &c.sets,
        )?)?),
        Command::Explain(c) => print(commands::explain(&config::load::<ExplainConfig>(
            c.config.as_deref(),
            &c.sets,
        )?)?),
        Command::Morf(c) => print(commands::morf(&config::load::<MorfConfig>(
            c.config.as_deref(),
            &c.sets,
        )?)?),
        Command::Prune(c) => print(commands::prune(&config::load::<PruneConfig>(
            c.config.as_deref(),
            &c.sets,
        )?)?),
        Command::Serve { common, port } => {
            let mut cfg = config::load::<ServeConfig>(common.config.as_deref(), &common.sets)?;
            if let Some(p) = port {
                cfg.port = p;
            }
            commands::serve(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
