use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use s2s::runner::{parse_config, run, Overrides, RunMode};

#[derive(Debug, Parser)]
#[command(
    name = "s2s",
    version,
    about = "Config-driven sequence-to-sequence training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train, evaluate or decode with a JSON config.
    Run {
        #[arg(long = "config_file")]
        config_file: PathBuf,
        #[arg(long, value_enum)]
        mode: RunMode,
        #[arg(long = "num_workers")]
        num_workers: Option<usize>,
        #[arg(long = "use_allreduce")]
        use_allreduce: Option<bool>,
        /// Write a per-step text log (train.log) next to the metrics CSV.
        #[arg(long = "enable_logs")]
        enable_logs: bool,
        #[arg(long = "infer_input")]
        infer_input: Option<PathBuf>,
        #[arg(long = "infer_output")]
        infer_output: Option<PathBuf>,
        /// This process's rank when the config uses the tcp transport.
        #[arg(long)]
        rank: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Command::Run {
        config_file,
        mode,
        num_workers,
        use_allreduce,
        enable_logs,
        infer_input,
        infer_output,
        rank,
    } = Cli::parse().command;

    let result = std::fs::read(&config_file)
        .map_err(|e| s2s::Error::Config(format!("{}: {e}", config_file.display())))
        .and_then(|bytes| parse_config(&bytes))
        .and_then(|config| {
            run(
                config,
                mode,
                Overrides {
                    num_workers,
                    use_allreduce,
                    enable_logs,
                    infer_input,
                    infer_output,
                    rank,
                },
            )
        });
    match result {
        Ok(outcome) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&outcome).expect("outcome serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
