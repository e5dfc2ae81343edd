//! `eos`: generate data, train and evaluate end-of-session models, and score streams.
//!
//! Exit codes: 0 success, 1 usage or environment, 2 invalid data, 3 numerical fault.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eos_core::features::DEFAULT_UTC_OFFSET_MINUTES;
use eos_core::sessionize::DEFAULT_GAP_SECONDS;
use eos_core::training::Level;
use eos_core::EosError;

use commands::Subset;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] EosError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: EosError },
}

impl CliError {
    pub fn io(path: &Path, source: EosError) -> Self {
        CliError::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        let core = match self {
            CliError::Usage(_) => return 1,
            CliError::Core(e) | CliError::File { source: e, .. } => e,
        };
        match core {
            EosError::Config(_) | EosError::Io(_) => 1,
            EosError::Parse { .. } | EosError::Invalid(_) | EosError::Checkpoint { .. } => 2,
            EosError::NonFinite { .. } | EosError::Diverged { .. } => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "eos",
    version,
    about = "End-of-session prediction for learning-platform logs"
)]
struct Cli {
    /// Overrides the seed of the generator or trainer config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key = value config file (generator config for `generate`, training config otherwise).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for data-parallel work.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct DataOpts {
    /// Session gap threshold in seconds.
    #[arg(long, default_value_t = DEFAULT_GAP_SECONDS)]
    gap: i64,
    /// Local time offset from UTC in minutes, for time-of-day features.
    #[arg(long, default_value_t = DEFAULT_UTC_OFFSET_MINUTES, allow_negative_numbers = true)]
    utc_offset: i32,
    /// Skip malformed log lines instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic log, its config and a summary into a directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Label every action with its session index and end-of-session flag.
    Sessionize {
        /// Log file, or a directory holding actions.csv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: DataOpts,
    },
    /// Write the per-action feature frames.
    Featurize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: DataOpts,
    },
    /// Train a model; writes model.ckpt, history.csv, train.cfg, split.csv and manifest.txt.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_level)]
        level: Option<Level>,
        #[command(flatten)]
        opts: DataOpts,
    },
    /// Evaluate a checkpoint; writes report.csv and trajectory.csv.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_level)]
        level: Option<Level>,
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        /// Also write per-action scores to scores.csv.
        #[arg(long)]
        dump_scores: bool,
        #[command(flatten)]
        opts: DataOpts,
    },
    /// Score a chronological action stream, one `student_id,timestamp,prob` line per action.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Log file, or `-` for stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-student state from an earlier run.
        #[arg(long)]
        state_in: Option<PathBuf>,
        /// Where to persist per-student state for a later run.
        #[arg(long)]
        state_out: Option<PathBuf>,
        #[arg(long, value_parser = parse_level, default_value = "student")]
        level: Level,
        #[arg(long, default_value_t = DEFAULT_GAP_SECONDS)]
        gap: i64,
        #[arg(long, default_value_t = DEFAULT_UTC_OFFSET_MINUTES, allow_negative_numbers = true)]
        utc_offset: i32,
    },
    /// Render evaluation reports (side by side) and data statistics as tables.
    Report {
        /// report.csv files to compare.
        #[arg(long = "eval")]
        reports: Vec<PathBuf>,
        /// Log to summarize.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_GAP_SECONDS)]
        gap: i64,
    },
}

fn parse_level(s: &str) -> Result<Level, String> {
    s.parse().map_err(|e: EosError| e.to_string())
}

pub struct Global {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub quiet: bool,
}

impl Global {
    pub fn note(&self, message: &str) {
        if !self.quiet {
            eprintln!("{message}");
        }
    }
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        eprintln!("built without the `parallel` feature; running on one thread");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    let g = Global {
        seed: cli.seed,
        config: cli.config,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Generate { out } => commands::cmd_generate(&g, &out),
        Command::Sessionize { data, out, opts } => commands::cmd_sessionize(&g, &data, &out, opts.gap, opts.lenient),
        Command::Featurize { data, out, opts } => {
            commands::cmd_featurize(&g, &data, &out, opts.gap, opts.utc_offset, opts.lenient)
        }
        Command::Train { data, out, level, opts } => commands::cmd_train(
            &g,
            commands::TrainArgs {
                data: &data,
                out: &out,
                level,
                gap: opts.gap,
                utc_offset: opts.utc_offset,
                lenient: opts.lenient,
            },
        ),
        Command::Evaluate {
            checkpoint,
            data,
            out,
            level,
            split_seed,
            subset,
            dump_scores,
            opts,
        } => commands::cmd_evaluate(
            &g,
            commands::EvaluateArgs {
                checkpoint: &checkpoint,
                data: &data,
                out: &out,
                level,
                split_seed,
                subset,
                dump_scores,
                gap: opts.gap,
                utc_offset: opts.utc_offset,
                lenient: opts.lenient,
            },
        ),
        Command::Score {
            checkpoint,
            input,
            out,
            state_in,
            state_out,
            level,
            gap,
            utc_offset,
        } => commands::cmd_score(
            &g,
            commands::ScoreArgs {
                checkpoint: &checkpoint,
                input: &input,
                out: out.as_deref(),
                state_in: state_in.as_deref(),
                state_out: state_out.as_deref(),
                level,
                gap,
                utc_offset,
            },
        ),
        Command::Report {
            reports,
            data,
            out,
            gap,
        } => commands::cmd_report(&g, &reports, data.as_deref(), out.as_deref(), gap),
    }
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
            ExitCode::from(e.exit_code())
        }
    }
}
