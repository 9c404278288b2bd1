//! Whole experiments: run or resume a config, keep checkpoints, emit
//! tables and scripts.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::aggregate::{AggState, UnitContribution};
use crate::checkpoint::{self, config_diff, snapshot, Checkpoint, CheckpointError, CheckpointStore};
use crate::config::Config;
use crate::engine::{execute, plan, EventLog, ExecOptions, Flow, Hooks, PlanError, RunLedger, RunUnit, TaskFactory};
use crate::plot::{
    default_scripts, emit_tables, render, write_atomic, EmittedTable, PlotContext, PlotError, PlotTemplate,
};

/// A task the runner can execute: how to build its logic, plus recorders.
pub struct RegisteredTask {
    pub factory: Box<dyn TaskFactory + Send>,
    pub hooks: Hooks,
}

/// Tasks selectable by name.
#[derive(Default)]
pub struct TaskRegistry {
    tasks: BTreeMap<String, RegisteredTask>,
}

impl TaskRegistry {
    pub fn new() -> TaskRegistry {
        TaskRegistry::default()
    }

    pub fn register(&mut self, name: &str, factory: impl TaskFactory + Send + 'static, hooks: Hooks) -> &mut Self {
        self.tasks.insert(
            name.to_string(),
            RegisteredTask {
                factory: Box::new(factory),
                hooks,
            },
        );
        self
    }

    pub fn get(&self, name: &str) -> Option<&RegisteredTask> {
        self.tasks.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> SessionError {
    let context = context.into();
    move |source| SessionError::Io { context, source }
}

#[derive(Clone, Default)]
pub struct SessionOptions {
    /// Overrides `[task] workers`.
    pub workers: Option<usize>,
    pub out_dir: PathBuf,
    pub events: Option<Arc<EventLog>>,
    /// Test hook: behave as if killed right after this many commits of this
    /// session (and the checkpoint write that may follow them).
    pub interrupt_after: Option<u64>,
    /// Test hook passed to the checkpoint store.
    pub checkpoint_fault_after_bytes: Option<usize>,
}

impl SessionOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> SessionOptions {
        SessionOptions {
            out_dir: out_dir.into(),
            ..SessionOptions::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub units_total: u64,
    pub completed: u64,
    pub failed: BTreeMap<u64, String>,
    /// Cells over all rules.
    pub cells: usize,
    pub interrupted: bool,
    pub tables: Vec<EmittedTable>,
    pub script: Option<PathBuf>,
    pub checkpoint: PathBuf,
}

/// `[checkpoint] path`, or `<out>/<name>.ckpt`.
pub fn checkpoint_path(config: &Config, out_dir: &Path) -> PathBuf {
    config
        .checkpoint
        .path
        .clone()
        .unwrap_or_else(|| out_dir.join(format!("{}.ckpt", config.task.name)))
}

/// Next to a checkpoint: the config text it was written for.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_os_string();
    s.push(".config");
    PathBuf::from(s)
}

/// Runs the whole plan from scratch.
pub fn run(config: &Config, task: &RegisteredTask, opts: &SessionOptions) -> Result<Summary, SessionError> {
    let units = plan(&config.space, config.task.repeats, config.task.seed)?;
    let ledger = RunLedger::new(units.len() as u64);
    let state = AggState::new(config.rules.clone());
    let path = checkpoint_path(config, &opts.out_dir);
    drive(config, task, opts, &path, units, ledger, state)
}

/// Continues from the checkpoint at `path` (default location when `None`).
pub fn resume(
    config: &Config,
    task: &RegisteredTask,
    path: Option<&Path>,
    opts: &SessionOptions,
) -> Result<Summary, SessionError> {
    let path = path.map_or_else(|| checkpoint_path(config, &opts.out_dir), Path::to_path_buf);
    let cp = Checkpoint::load(&path)?;
    let resumed = match checkpoint::resume(&cp, config) {
        Ok(r) => r,
        Err(CheckpointError::ConfigChanged(why)) => {
            let mut msg = why;
            if let Ok(old) = fs::read_to_string(sidecar_path(&path)) {
                let diff = config_diff(&old, &config.semantic_text());
                if !diff.is_empty() {
                    msg.push('\n');
                    msg.push_str(diff.trim_end());
                }
            }
            return Err(CheckpointError::ConfigChanged(msg).into());
        }
        Err(e) => return Err(e.into()),
    };
    drive(config, task, opts, &path, resumed.remaining, resumed.ledger, resumed.state)
}

fn drive(
    config: &Config,
    task: &RegisteredTask,
    opts: &SessionOptions,
    ckpt_path: &Path,
    units: Vec<RunUnit>,
    mut ledger: RunLedger,
    mut state: AggState,
) -> Result<Summary, SessionError> {
    let mut store = CheckpointStore::new(ckpt_path, config.checkpoint.keep);
    store.fault_after_bytes = opts.checkpoint_fault_after_bytes;
    write_atomic(&sidecar_path(ckpt_path), config.semantic_text().as_bytes())
        .map_err(io_err(format!("writing {}", sidecar_path(ckpt_path).display())))?;
    let write_cp = |ledger: &RunLedger, state: &AggState| {
        store
            .write(&snapshot(ledger, state, config))
            .map_err(io_err(format!("writing checkpoint {}", ckpt_path.display())))
    };
    write_cp(&ledger, &state)?;

    let interval = Duration::from_secs(config.checkpoint.interval_seconds);
    let mut last_write = Instant::now();
    let mut commits = 0u64;
    let mut write_error: Option<SessionError> = None;
    let interrupted = if opts.interrupt_after == Some(0) {
        true
    } else {
        let workers = opts.workers.unwrap_or_else(|| config.task.workers.resolve()).max(1);
        let exec = ExecOptions {
            workers,
            repeats: config.task.repeats,
            max_steps: config.task.max_steps,
            events: opts.events.as_deref(),
        };
        let rules = &config.rules;
        let outcome = execute(
            &mut ledger,
            &units,
            &config.space,
            task.factory.as_ref(),
            &task.hooks,
            &exec,
            |_, point, obs| UnitContribution::build(rules, point, &obs).map_err(|e| e.to_string()),
            |unit, contribution, ledger| {
                state
                    .commit_unit(unit.unit_index, contribution)
                    .expect("each unit commits once");
                commits += 1;
                if interval.is_zero() || last_write.elapsed() >= interval {
                    if let Err(e) = write_cp(ledger, &state) {
                        write_error = Some(e);
                        return Flow::Interrupt;
                    }
                    last_write = Instant::now();
                }
                if opts.interrupt_after == Some(commits) {
                    Flow::Interrupt
                } else {
                    Flow::Continue
                }
            },
        );
        outcome.interrupted
    };
    if let Some(e) = write_error {
        return Err(e);
    }

    let cells = (0..state.rules().len()).map(|i| state.cell_count(i)).sum();
    let mut summary = Summary {
        units_total: ledger.units_total,
        completed: ledger.completed.len() as u64,
        failed: ledger.failed.clone(),
        cells,
        interrupted,
        tables: Vec::new(),
        script: None,
        checkpoint: ckpt_path.to_path_buf(),
    };
    if interrupted {
        return Ok(summary);
    }
    write_cp(&ledger, &state)?;
    let (tables, script) = emit_outputs(config, &state, ledger.completed.len() as u64, &opts.out_dir)?;
    summary.tables = tables;
    summary.script = Some(script);
    Ok(summary)
}

/// Writes the data files and the `.plt` script for the current state.
pub fn emit_outputs(
    config: &Config,
    state: &AggState,
    completed: u64,
    out_dir: &Path,
) -> Result<(Vec<EmittedTable>, PathBuf), SessionError> {
    let name = &config.task.name;
    let tables = emit_tables(name, &state.finalize_all(), out_dir)
        .map_err(io_err(format!("writing tables to {}", out_dir.display())))?;
    let script = match &config.plot.template {
        Some(t) => {
            let text = fs::read_to_string(t).map_err(io_err(format!("reading template {}", t.display())))?;
            let ctx = PlotContext::for_run(config, &tables, completed);
            render(&PlotTemplate::parse(&text)?, &ctx)?
        }
        None => default_scripts(&config.rules, &tables),
    };
    let script_name = config.plot.script.clone().unwrap_or_else(|| format!("{}.plt", name));
    let script_path = out_dir.join(script_name);
    write_atomic(&script_path, script.as_bytes())
        .map_err(io_err(format!("writing {}", script_path.display())))?;
    Ok((tables, script_path))
}

/// Tables and script from a checkpoint alone, for partial results.
pub fn plot_from_checkpoint(config: &Config, cp: &Checkpoint, out_dir: &Path) -> Result<Vec<EmittedTable>, SessionError> {
    let resumed = checkpoint::resume(cp, config)?;
    let (tables, _) = emit_outputs(config, &resumed.state, cp.completed_count(), out_dir)?;
    Ok(tables)
}
