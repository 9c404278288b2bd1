//! `sweepforge run|resume|inspect|plot`
//!
//! Exit status: 0 success, 1 finished with failed units, 2 config error,
//! 3 checkpoint error, 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use sweepforge::checkpoint::Checkpoint;
use sweepforge::demo::demo_registry;
use sweepforge::engine::EventLog;
use sweepforge::session::{self, SessionError, SessionOptions, Summary};
use sweepforge::{parse_config, CheckpointError, Config};

const EXIT_FAILED_UNITS: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "sweepforge", version, about = "Run parameter sweeps with resumable checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunFlags {
    /// Worker threads; overrides `[task] workers`.
    #[arg(long, env = "SWEEPFORGE_WORKERS")]
    workers: Option<usize>,
    /// Directory for tables, scripts and the default checkpoint.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Registered task to run.
    #[arg(long, default_value = "sir")]
    task: String,
    /// Do not print EVT progress lines to stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every unit of a config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Continue a run from its checkpoint.
    Resume {
        config: PathBuf,
        /// Checkpoint file; defaults to `[checkpoint] path` or `<out>/<name>.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Show what a checkpoint contains.
    Inspect { checkpoint: PathBuf },
    /// Write tables and the script from a checkpoint, finished or not.
    Plot {
        config: PathBuf,
        /// Checkpoint file; defaults to `[checkpoint] path` or `<out>/<name>.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn load_config(path: &Path) -> Result<Config, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| fail(EXIT_IO, format!("{}: {}", path.display(), e)))?;
    parse_config(&text).map_err(|errs| {
        let lines: Vec<String> = errs
            .0
            .iter()
            .map(|e| format!("{}:{}:{}: {}", path.display(), e.line, e.column, e.kind))
            .collect();
        fail(EXIT_CONFIG, lines.join("\n"))
    })
}

fn session_failure(e: SessionError) -> Failure {
    match e {
        SessionError::Checkpoint(CheckpointError::Io(io)) => fail(EXIT_IO, io.to_string()),
        SessionError::Checkpoint(c) => fail(EXIT_CHECKPOINT, c.to_string()),
        SessionError::Plan(p) => fail(EXIT_CONFIG, p.to_string()),
        SessionError::Plot(p) => fail(EXIT_IO, p.to_string()),
        e @ SessionError::Io { .. } => fail(EXIT_IO, e.to_string()),
    }
}

fn options(flags: &RunFlags) -> SessionOptions {
    let mut opts = SessionOptions::new(&flags.out);
    opts.workers = flags.workers;
    if !flags.quiet {
        opts.events = Some(Arc::new(EventLog::stderr()));
    }
    opts
}

fn report(s: &Summary) -> u8 {
    for (unit, why) in &s.failed {
        eprintln!("unit {} failed: {}", unit, why);
    }
    println!("done units={} failed={} cells={}", s.completed, s.failed.len(), s.cells);
    if s.failed.is_empty() {
        0
    } else {
        EXIT_FAILED_UNITS
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let registry = demo_registry();
    let task_for = |name: &str| {
        registry.get(name).ok_or_else(|| {
            let known: Vec<&str> = registry.names().collect();
            fail(EXIT_CONFIG, format!("unknown task `{}` (known: {})", name, known.join(", ")))
        })
    };
    match cli.command {
        Command::Run { config, flags } => {
            let cfg = load_config(&config)?;
            let task = task_for(&flags.task)?;
            let s = session::run(&cfg, task, &options(&flags)).map_err(session_failure)?;
            Ok(report(&s))
        }
        Command::Resume {
            config,
            checkpoint,
            flags,
        } => {
            let cfg = load_config(&config)?;
            let task = task_for(&flags.task)?;
            let s = session::resume(&cfg, task, checkpoint.as_deref(), &options(&flags)).map_err(session_failure)?;
            Ok(report(&s))
        }
        Command::Inspect { checkpoint } => {
            let cp = Checkpoint::load(&checkpoint).map_err(|e| match e {
                CheckpointError::Io(io) => fail(EXIT_IO, format!("{}: {}", checkpoint.display(), io)),
                other => fail(EXIT_CHECKPOINT, other.to_string()),
            })?;
            let done = cp.completed_count();
            let pct = if cp.units_total == 0 {
                100.0
            } else {
                100.0 * done as f64 / cp.units_total as f64
            };
            println!("version {}", cp.format_version);
            println!("config_hash {}", cp.config_hash_hex());
            println!("master_seed {}", cp.master_seed);
            println!("units_total {}", cp.units_total);
            println!("completed {}/{} ({:.1}%)", done, cp.units_total, pct);
            for (rule, entries) in &cp.agg {
                let cells: std::collections::BTreeSet<String> = entries.iter().map(|e| e.key.canonical()).collect();
                println!("rule {} cells={}", rule, cells.len());
            }
            Ok(0)
        }
        Command::Plot {
            config,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&config)?;
            let path = checkpoint.unwrap_or_else(|| session::checkpoint_path(&cfg, &out));
            let cp = Checkpoint::load(&path).map_err(|e| session_failure(e.into()))?;
            let tables = session::plot_from_checkpoint(&cfg, &cp, &out).map_err(session_failure)?;
            for t in tables {
                println!("{}", t.path.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
