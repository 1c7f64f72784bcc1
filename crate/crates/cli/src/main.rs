mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use egovpa::error::Error;
use egovpa::numcore::Fault;
use egovpa::prompting::Method;
use egovpa::synthdata::SplitName;
use egovpa::verify::{Suite, VerifyOptions};

/// Prompt-basis adaptation of a toy video-language dual encoder.
#[derive(Parser, Debug)]
#[command(name = "egovpa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the default run configuration.
    Defaults,
    /// Generate the synthetic dataset into a directory.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a backbone, or adapt one with a method.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pretrained checkpoint to adapt.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        pretrain: bool,
        /// Share of the adaptation training split to use.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Task::Classify)]
        task: Task,
        #[arg(long, default_value = "adapt_val", value_parser = commands::parse_split)]
        split: SplitName,
        /// Evaluate as this method instead of the one stored.
        #[arg(long)]
        method: Option<Method>,
        /// Also write the metrics as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid.
    Ablate {
        /// Grid file; the built-in grid over the defaults when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run verification suites; exits nonzero if any check fails.
    Verify {
        #[arg(long, value_enum, default_values_t = [SuiteArg::All])]
        suite: Vec<SuiteArg>,
        /// Corrupt one backward rule to confirm the checks notice.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
        /// Seeds for the model gradient checks.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Print parameter counts per method.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Vec<Method>,
        /// Use the full-size encoder and prompt shapes.
        #[arg(long)]
        full_size: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Classify,
    Retrieve,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    Grad,
    Oracle,
    Stats,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    Softmax,
    Attention,
    Layernorm,
}

/// Failures the CLI raises itself.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed")]
    Verify,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(f) = e.downcast_ref::<Failure>() {
        return match f {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Verify => EXIT_NUMERIC,
        };
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::UnknownMethod(_)) => EXIT_USAGE,
        Some(Error::Data(_) | Error::Io(_)) => EXIT_DATA,
        Some(Error::Shape { .. } | Error::Contract(_) | Error::Numeric(_)) => EXIT_NUMERIC,
        None if e.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => EXIT_DATA,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Defaults => print!("{}", commands::defaults()),
        Command::Gen { config, out } => println!("{}", commands::gen(config.as_deref(), &out)?),
        Command::Train {
            config,
            method,
            dataset,
            out,
            backbone,
            pretrain,
            fraction,
        } => {
            let m = commands::train(commands::TrainArgs {
                config: config.as_deref(),
                method,
                dataset: &dataset,
                out: &out,
                backbone: backbone.as_deref(),
                pretrain,
                fraction,
            })?;
            println!("{}", serde_json::to_string_pretty(&m.metrics)?);
        }
        Command::Eval {
            checkpoint,
            dataset,
            task,
            split,
            method,
            out,
        } => {
            let metrics = commands::eval(&checkpoint, &dataset, task, split, method)?;
            let text = serde_json::to_string_pretty(&metrics)?;
            if let Some(out) = out {
                std::fs::write(&out, format!("{text}\n"))?;
            }
            println!("{text}");
        }
        Command::Ablate { grid, out, jobs } => {
            let jobs = jobs.unwrap_or_else(commands::default_jobs);
            let report = commands::ablate(grid.as_deref(), &out, jobs)?;
            print!("{}", report.table_text());
        }
        Command::Verify {
            suite,
            fault,
            seeds,
        } => {
            let suites: Vec<Suite> = if suite.contains(&SuiteArg::All) {
                Suite::ALL.to_vec()
            } else {
                suite
                    .iter()
                    .map(|s| match s {
                        SuiteArg::Grad => Suite::Grad,
                        SuiteArg::Oracle => Suite::Oracle,
                        _ => Suite::Stats,
                    })
                    .collect()
            };
            let mut opts = VerifyOptions {
                fault: fault.map(|f| match f {
                    FaultArg::Softmax => Fault::SoftmaxBackward,
                    FaultArg::Attention => Fault::AttentionBackward,
                    FaultArg::Layernorm => Fault::LayerNormBackward,
                }),
                ..VerifyOptions::default()
            };
            if let Some(n) = seeds {
                opts.grad_seeds = n;
            }
            if !commands::verify(&suites, &opts)? {
                return Err(Failure::Verify.into());
            }
        }
        Command::Params {
            config,
            method,
            full_size,
        } => print!("{}", commands::params(config.as_deref(), &method, full_size)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
