//! Command-line front end: `fusionbench <stage> --config PATH`.

mod config;
mod stages;

pub use config::ExperimentConfig;
pub use stages::{Figure, Workspace};

use crate::error::Error;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

pub const OUT_ENV: &str = "FUSIONBENCH_OUT";

#[derive(Parser, Debug)]
#[command(name = "fusionbench", about = "Object/context fusion robustness experiments")]
struct Cli {
    /// Experiment config (key = value lines). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single-threaded execution. Every stage already runs on one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic experiment set.
    GenData,
    /// Pretrain the object and context streams.
    Pretrain,
    /// Train the classifier heads (plain, regularized and retrained).
    Train,
    /// Craft FGSM examples at one strength and score every model.
    Attack,
    /// Accuracy curves under blur and FGSM.
    Curve,
    /// Feature shift, PCA projections and fusion weights.
    Analyze,
    /// Run a canned figure experiment end to end.
    Reproduce {
        #[arg(value_enum)]
        figure: Figure,
    },
    /// Collect the text artifacts into report.md.
    Report,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Runs the command line in `argv` (program name first) and returns the exit code.
pub fn run(argv: Vec<String>) -> i32 {
    run_with(argv, std::env::var(OUT_ENV).ok())
}

/// As [`run`], with the output-directory override passed explicitly.
pub fn run_with(argv: Vec<String>, out_override: Option<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut cfg = match &cli.config {
        Some(p) => match ExperimentConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("fusionbench: {e}");
                return exit_code(&e);
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = out_override.filter(|d| !d.is_empty()) {
        cfg.output = PathBuf::from(dir);
    }
    let Some(command) = cli.command else {
        eprintln!("fusionbench: no subcommand given\n\n{}", <Cli as clap::CommandFactory>::command().render_usage());
        return 1;
    };
    let ws = Workspace::new(cfg);
    let result = match command {
        Command::GenData => ws.gen_data(),
        Command::Pretrain => ws.pretrain(),
        Command::Train => ws.train(),
        Command::Attack => ws.attack(),
        Command::Curve => ws.curve(),
        Command::Analyze => ws.analyze(),
        Command::Reproduce { figure } => stages::reproduce(ws.config(), figure),
        Command::Report => ws.report(),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("fusionbench: {e}");
            exit_code(&e)
        }
    }
}
