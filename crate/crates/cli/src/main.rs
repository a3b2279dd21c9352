use std::path::PathBuf;
use std::process::ExitCode;

use ci_stonet::{run, CliError, Command, ExperimentConfig};
use clap::Parser;

/// Confounder imputation with stochastic neural networks.
#[derive(Parser, Debug)]
#[command(name = "ci-stonet", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = ExperimentConfig::load(&args.config).and_then(|mut cfg| {
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(o) = args.out {
            cfg.output_dir = o;
        }
        run(args.command, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> ExitCode {
    eprintln!("error: {e}");
    eprintln!("{}", serde_json::to_string(&e.record()).expect("error record serializes"));
    ExitCode::from(e.exit_code() as u8)
}
