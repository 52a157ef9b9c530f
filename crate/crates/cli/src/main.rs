use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use speechloss::multitask::{CombinationWeights, LossKind};
use speechloss::pesq::{PesqTables, TABLES_ENV_VAR};

mod commands;
mod format;

/// Differentiable speech-quality objectives: scoring, mixing, gradient
/// checks and mask experiments.
#[derive(Debug, Parser)]
#[command(name = "speechloss", version, about)]
struct Cli {
    /// Alternative perceptual-model table file (checksum-verified).
    #[arg(long, global = true, env = TABLES_ENV_VAR, value_name = "PATH")]
    tables: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score a degraded recording against its clean reference.
    Score(ScoreArgs),
    /// Mix clean speech with noise at a target SNR.
    Mix(MixArgs),
    /// Check an objective's analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run oracle masks and mask refinement over an SNR grid.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, Args)]
struct WeightArgs {
    /// Weight of the PESQ term in combined objectives.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Weight of the STOI term in combined objectives.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
}

impl WeightArgs {
    fn weights(self) -> speechloss::Result<CombinationWeights> {
        CombinationWeights::new(self.alpha, self.beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Clean reference WAV (16 kHz).
    clean: PathBuf,
    /// Degraded or enhanced WAV (16 kHz).
    degraded: PathBuf,
    #[command(flatten)]
    weights: WeightArgs,
    /// Output format.
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
}

#[derive(Debug, Args)]
struct MixArgs {
    /// Clean speech WAV (16 kHz).
    clean: PathBuf,
    /// Noise WAV (16 kHz).
    noise: PathBuf,
    /// Target SNR in dB.
    #[arg(long, allow_negative_numbers = true)]
    snr: f64,
    /// Output WAV (float-32).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Objective: sdr, pesq, stoi, sdr-pesq, sdr-stoi or sdr-pesq-stoi.
    #[arg(value_parser = parse_loss)]
    loss: LossKind,
    /// Seed of the synthetic test pair and of the checked coordinates.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    weights: WeightArgs,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Comma-separated SNR grid in dB.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_values_t = speechloss::report::DEFAULT_SNRS
    )]
    snr: Vec<f64>,
    /// Refinement iterations per objective.
    #[arg(long, default_value_t = speechloss::mask::DEFAULT_STEPS)]
    steps: usize,
    /// Initial refinement step size.
    #[arg(long, default_value_t = speechloss::mask::DEFAULT_STEP_SIZE)]
    step_size: f64,
    /// Seed of the synthetic utterance suite.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of suite utterances.
    #[arg(long, default_value_t = speechloss::report::DEFAULT_UTTERANCES)]
    utterances: usize,
    #[command(flatten)]
    weights: WeightArgs,
    /// Directory receiving report.csv and summary.json.
    #[arg(long)]
    out: PathBuf,
    /// What to print on standard output.
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: speechloss::Error| e.to_string())
}

/// Outcome of a subcommand that ran to completion.
pub enum Outcome {
    Success,
    CheckFailed,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// Joins the error chain with `: `, skipping causes whose text is already
/// part of the previous message.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut previous = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !previous.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        previous = text;
    }
    out
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let tables = || -> speechloss::Result<PesqTables> {
        match &cli.tables {
            Some(path) if !path.as_os_str().is_empty() => PesqTables::from_file(path),
            _ => Ok(PesqTables::standard().clone()),
        }
    };
    match cli.command {
        Command::Score(a) => {
            commands::score(&a.clean, &a.degraded, a.weights.weights()?, a.format, &tables()?)
        }
        Command::Mix(a) => commands::mix(&a.clean, &a.noise, a.snr, &a.out),
        Command::Gradcheck(a) => {
            commands::gradcheck(a.loss, a.seed, a.weights.weights()?, &tables()?)
        }
        Command::Experiment(a) => {
            let config = speechloss::report::ExperimentConfig {
                seed: a.seed,
                snrs: a.snr,
                utterances: a.utterances,
                weights: a.weights.weights()?,
                steps: a.steps,
                step_size: a.step_size,
                tables: tables()?,
                ..Default::default()
            };
            commands::experiment(&config, &a.out, a.format)
        }
    }
}
