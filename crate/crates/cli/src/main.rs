//! `lagdiff`: data generation, pretraining, personalization, sampling,
//! mask inspection, ablation and evaluation.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(lagdiff::Error),
}

impl From<lagdiff::Error> for CliError {
    fn from(e: lagdiff::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "lagdiff", version, about = "Toy diffusion with personalized residuals and LAG sampling")]
struct Cli {
    /// Base seed (overrides the config file).
    #[arg(long, global = true, env = "LAGDIFF_SEED")]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, env = "LAGDIFF_THREADS")]
    threads: Option<usize>,
    /// JSON config file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a pretraining corpus or a concept reference set.
    GenData(commands::GenDataArgs),
    /// Train the base denoiser on a corpus.
    Pretrain(commands::PretrainArgs),
    /// Learn residuals for one concept.
    Personalize(commands::PersonalizeArgs),
    /// Sample an image.
    Sample(commands::SampleArgs),
    /// Sample with LAG and write every mask plus a coverage table.
    InspectMasks(commands::SampleArgs),
    /// Run an ablation plan over concept directories.
    Ablate(commands::AblateArgs),
    /// Score generated images against references.
    Eval(commands::EvalArgs),
    /// Print residual and base parameter counts.
    ParamReport(commands::ParamReportArgs),
}

fn init_logging(level: &str) {
    let filter = level.parse().unwrap_or(log::LevelFilter::Info);
    env_logger::Builder::new()
        .filter_level(filter)
        .format(|buf, record| writeln!(buf, "level={} {}", record.level().as_str().to_lowercase(), record.args()))
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(&cli.log_level);
    let global = commands::Global {
        seed: cli.seed,
        threads: cli.threads,
        config: cli.config,
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&global, a),
        Command::Pretrain(a) => commands::pretrain(&global, a),
        Command::Personalize(a) => commands::personalize(&global, a),
        Command::Sample(a) => commands::sample(&global, a, false),
        Command::InspectMasks(a) => commands::sample(&global, a, true),
        Command::Ablate(a) => commands::ablate(&global, a),
        Command::Eval(a) => commands::eval(&global, a),
        Command::ParamReport(a) => commands::param_report(&global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun with --help for usage.");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            log::error!("event=failed error={e:?}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
