//! Scheduling and the per-run task flow.
//!
//! A *task* is one parameter point; a *run unit* is one repeated run of it.
//! Units are numbered `point_index * repeats + repeat_index` and are the
//! granularity of scheduling, commit and recovery.
//!
//! Each unit walks the flow below on a worker thread, firing the built-in
//! time points as it goes:
//!
//! ```text
//! BeforeRun -> init_run -> { BeforeStep -> step -> AfterStep }* -> finish_run -> AfterRun
//! ```
//!
//! `BeforeTask` and `AfterTask` fire on the coordinator around all runs of a
//! point. Values recorded during a run are buffered on the worker and only
//! reach shared state when the whole unit commits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use crossbeam_channel::{bounded, unbounded, TrySendError};
use rand::SeedableRng;
use rand_pcg::Pcg64;
use thiserror::Error;

use crate::config::{ParamValue, ParameterPoint, ParameterSpace, MAX_UNITS};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TimePoint {
    BeforeTask,
    BeforeRun,
    BeforeStep,
    AfterStep,
    AfterRun,
    AfterTask,
    User(String),
}

impl TimePoint {
    pub fn user(name: &str) -> TimePoint {
        TimePoint::User(name.to_string())
    }

    /// Fired by the coordinator rather than inside a run.
    pub fn is_task_level(&self) -> bool {
        matches!(self, TimePoint::BeforeTask | TimePoint::AfterTask)
    }
}

impl fmt::Display for TimePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimePoint::BeforeTask => f.write_str("before_task"),
            TimePoint::BeforeRun => f.write_str("before_run"),
            TimePoint::BeforeStep => f.write_str("before_step"),
            TimePoint::AfterStep => f.write_str("after_step"),
            TimePoint::AfterRun => f.write_str("after_run"),
            TimePoint::AfterTask => f.write_str("after_task"),
            TimePoint::User(n) => write!(f, "user:{}", n),
        }
    }
}

impl FromStr for TimePoint {
    type Err = String;

    fn from_str(s: &str) -> Result<TimePoint, String> {
        Ok(match s {
            "before_task" => TimePoint::BeforeTask,
            "before_run" => TimePoint::BeforeRun,
            "before_step" => TimePoint::BeforeStep,
            "after_step" => TimePoint::AfterStep,
            "after_run" => TimePoint::AfterRun,
            "after_task" => TimePoint::AfterTask,
            _ => match s.strip_prefix("user:") {
                Some(n) if crate::config::is_identifier(n) => TimePoint::User(n.to_string()),
                _ => return Err(format!("unknown time point `{}`", s)),
            },
        })
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seed of one run unit: the SplitMix64 finalizer applied to
/// `master_seed + GOLDEN_GAMMA * (unit_index + 1)`, all mod 2^64.
pub fn derive_seed(master_seed: u64, unit_index: u64) -> u64 {
    let mut z = master_seed.wrapping_add(GOLDEN_GAMMA.wrapping_mul(unit_index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunUnit {
    pub unit_index: u64,
    pub point_index: u64,
    pub repeat_index: u64,
    pub seed: u64,
}

impl RunUnit {
    pub fn new(unit_index: u64, repeats: u64, master_seed: u64) -> RunUnit {
        RunUnit {
            unit_index,
            point_index: unit_index / repeats,
            repeat_index: unit_index % repeats,
            seed: derive_seed(master_seed, unit_index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("repeats must be at least 1")]
    NoRepeats,
    #[error("points x repeats exceeds 2^53")]
    TooManyUnits,
}

/// Every (point, repeat) unit in unit-index order.
pub fn plan(space: &ParameterSpace, repeats: u64, master_seed: u64) -> Result<Vec<RunUnit>, PlanError> {
    if repeats == 0 {
        return Err(PlanError::NoRepeats);
    }
    let total = space
        .checked_point_count()
        .and_then(|p| p.checked_mul(repeats))
        .filter(|&t| t <= MAX_UNITS)
        .ok_or(PlanError::TooManyUnits)?;
    Ok((0..total)
        .map(|i| RunUnit::new(i, repeats, master_seed))
        .collect())
}

/// One recorded value.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub timepoint: TimePoint,
    pub result_id: String,
    pub value: f64,
}

pub type TaskError = Box<dyn std::error::Error + Send + Sync>;
pub type TaskResult<T> = Result<T, TaskError>;

/// The user-implemented logic of one run. A fresh instance is created for
/// every run unit.
pub trait TaskLogic {
    fn init_run(&mut self, ctx: &mut RunContext<'_>) -> TaskResult<()>;

    /// One step; return `false` to end the run.
    fn step(&mut self, ctx: &mut RunContext<'_>) -> TaskResult<bool>;

    fn finish_run(&mut self, _ctx: &mut RunContext<'_>) -> TaskResult<()> {
        Ok(())
    }

    /// Called at every built-in run-level time point; record values with
    /// [`RunContext::record`].
    fn record(&mut self, _tp: &TimePoint, _ctx: &mut RunContext<'_>) -> TaskResult<()> {
        Ok(())
    }
}

/// Creates task logic for a point.
pub trait TaskFactory: Sync {
    fn create(&self, point: &ParameterPoint) -> TaskResult<Box<dyn TaskLogic>>;
}

impl<F> TaskFactory for F
where
    F: Fn(&ParameterPoint) -> TaskResult<Box<dyn TaskLogic>> + Sync,
{
    fn create(&self, point: &ParameterPoint) -> TaskResult<Box<dyn TaskLogic>> {
        self(point)
    }
}

/// What task-level recorders see.
#[derive(Debug, Clone)]
pub struct TaskEvent<'a> {
    pub timepoint: TimePoint,
    pub point: &'a ParameterPoint,
    /// Runs of this point committed so far (including earlier sessions).
    pub committed_runs: u64,
}

pub type RunHook = Arc<dyn Fn(&mut RunContext<'_>) -> Result<(), String> + Send + Sync>;
pub type TaskHook = Arc<dyn Fn(&TaskEvent<'_>) + Send + Sync>;

/// Recorders registered at time points.
#[derive(Clone, Default)]
pub struct Hooks {
    run: Vec<(TimePoint, RunHook)>,
    task: Vec<(TimePoint, TaskHook)>,
}

impl Hooks {
    pub fn new() -> Hooks {
        Hooks::default()
    }

    /// Registers a recorder at a run-level point (built-in or user).
    ///
    /// # Panics
    /// If `tp` is `BeforeTask` or `AfterTask`; use [`Hooks::on_task`].
    pub fn on_run<F>(&mut self, tp: TimePoint, f: F) -> &mut Self
    where
        F: Fn(&mut RunContext<'_>) -> Result<(), String> + Send + Sync + 'static,
    {
        assert!(!tp.is_task_level(), "{} is a task-level point", tp);
        self.run.push((tp, Arc::new(f)));
        self
    }

    /// Registers a coordinator-side recorder at `BeforeTask` or `AfterTask`.
    pub fn on_task<F>(&mut self, tp: TimePoint, f: F) -> &mut Self
    where
        F: Fn(&TaskEvent<'_>) + Send + Sync + 'static,
    {
        assert!(tp.is_task_level(), "{} is not a task-level point", tp);
        self.task.push((tp, Arc::new(f)));
        self
    }

    fn run_hooks<'h>(&'h self, tp: &'h TimePoint) -> impl Iterator<Item = &'h RunHook> + 'h {
        self.run.iter().filter(move |(t, _)| t == tp).map(|(_, h)| h)
    }

    fn fire_task(&self, event: &TaskEvent<'_>) {
        for (_, hook) in self.task.iter().filter(|(t, _)| *t == event.timepoint) {
            hook(event);
        }
    }
}

/// Everything a run can see: its point, its RNG and its observation buffer.
///
/// The RNG is PCG-64 (`rand_pcg::Pcg64`) seeded with
/// `Pcg64::seed_from_u64(unit.seed)`; it is the only randomness a run gets.
pub struct RunContext<'a> {
    unit: RunUnit,
    point: &'a ParameterPoint,
    step_index: u64,
    rng: Pcg64,
    buffer: Vec<Observation>,
    firing: Option<TimePoint>,
    hooks: &'a Hooks,
    error: Option<String>,
}

impl<'a> RunContext<'a> {
    pub fn new(unit: RunUnit, point: &'a ParameterPoint, hooks: &'a Hooks) -> RunContext<'a> {
        RunContext {
            unit,
            point,
            step_index: 0,
            rng: Pcg64::seed_from_u64(unit.seed),
            buffer: Vec::new(),
            firing: None,
            hooks,
            error: None,
        }
    }

    pub fn unit(&self) -> &RunUnit {
        &self.unit
    }

    pub fn point(&self) -> &ParameterPoint {
        self.point
    }

    pub fn repeat_index(&self) -> u64 {
        self.unit.repeat_index
    }

    /// Steps completed before the current one; starts at 0.
    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn rng(&mut self) -> &mut Pcg64 {
        &mut self.rng
    }

    /// The time point currently being fired, if any.
    pub fn firing(&self) -> Option<&TimePoint> {
        self.firing.as_ref()
    }

    pub fn param(&self, name: &str) -> TaskResult<&ParamValue> {
        self.point
            .get(name)
            .ok_or_else(|| format!("missing parameter `{}`", name).into())
    }

    pub fn param_f64(&self, name: &str) -> TaskResult<f64> {
        self.param(name)?
            .as_f64()
            .ok_or_else(|| format!("parameter `{}` is not numeric", name).into())
    }

    pub fn param_i64(&self, name: &str) -> TaskResult<i64> {
        self.param(name)?
            .as_i64()
            .ok_or_else(|| format!("parameter `{}` is not an integer", name).into())
    }

    pub fn param_text(&self, name: &str) -> TaskResult<&str> {
        self.param(name)?
            .as_text()
            .ok_or_else(|| format!("parameter `{}` is not text", name).into())
    }

    /// Records a value at the time point being fired. Recording outside a
    /// time point fails the unit.
    pub fn record(&mut self, result_id: &str, value: f64) {
        match &self.firing {
            Some(tp) => self.buffer.push(Observation {
                timepoint: tp.clone(),
                result_id: result_id.to_string(),
                value,
            }),
            None => {
                self.error.get_or_insert_with(|| {
                    format!("`{}` recorded outside of a time point", result_id)
                });
            }
        }
    }

    /// Fires the user time point `name`: runs the recorders registered for
    /// it, then `f`, with recording directed at that point.
    pub fn fire<F: FnOnce(&mut RunContext<'a>)>(&mut self, name: &str, f: F) {
        let tp = TimePoint::user(name);
        let previous = self.firing.replace(tp.clone());
        let hooks = self.hooks;
        for hook in hooks.run_hooks(&tp) {
            if let Err(e) = hook(self) {
                self.error.get_or_insert(format!("recorder at {}: {}", tp, e));
            }
        }
        f(self);
        self.firing = previous;
    }

    pub fn observations(&self) -> &[Observation] {
        &self.buffer
    }

    fn fire_builtin(&mut self, tp: TimePoint, logic: &mut dyn TaskLogic) -> Result<(), String> {
        self.firing = Some(tp.clone());
        let hooks = self.hooks;
        for hook in hooks.run_hooks(&tp) {
            hook(self).map_err(|e| format!("recorder at {}: {}", tp, e))?;
        }
        logic
            .record(&tp, self)
            .map_err(|e| format!("recording at {}: {}", tp, e))?;
        self.firing = None;
        Ok(())
    }
}

/// Runs one unit's whole flow and returns its observation buffer.
pub fn run_unit(
    unit: RunUnit,
    point: &ParameterPoint,
    factory: &dyn TaskFactory,
    hooks: &Hooks,
    max_steps: Option<u64>,
) -> Result<Vec<Observation>, String> {
    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<Vec<Observation>, String> {
        let mut logic = factory.create(point).map_err(|e| e.to_string())?;
        let logic = logic.as_mut();
        let mut ctx = RunContext::new(unit, point, hooks);
        ctx.fire_builtin(TimePoint::BeforeRun, logic)?;
        logic.init_run(&mut ctx).map_err(|e| e.to_string())?;
        while max_steps.is_none_or(|m| ctx.step_index < m) {
            ctx.fire_builtin(TimePoint::BeforeStep, logic)?;
            let more = logic.step(&mut ctx).map_err(|e| e.to_string())?;
            ctx.fire_builtin(TimePoint::AfterStep, logic)?;
            ctx.step_index += 1;
            if !more {
                break;
            }
        }
        logic.finish_run(&mut ctx).map_err(|e| e.to_string())?;
        ctx.fire_builtin(TimePoint::AfterRun, logic)?;
        match ctx.error {
            Some(e) => Err(e),
            None => Ok(ctx.buffer),
        }
    }));
    match outcome {
        Ok(r) => r,
        Err(payload) => Err(panic_message(payload.as_ref())),
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    let msg = payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".to_string());
    format!("panicked: {}", msg)
}

/// Which units are done, running, or failed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunLedger {
    pub units_total: u64,
    pub completed: BTreeSet<u64>,
    pub in_flight: BTreeSet<u64>,
    pub failed: BTreeMap<u64, String>,
}

impl RunLedger {
    pub fn new(units_total: u64) -> RunLedger {
        RunLedger {
            units_total,
            ..RunLedger::default()
        }
    }
}

/// Destination for `EVT` progress lines.
pub struct EventLog {
    out: Mutex<Box<dyn Write + Send>>,
}

impl EventLog {
    pub fn new(out: Box<dyn Write + Send>) -> EventLog {
        EventLog { out: Mutex::new(out) }
    }

    pub fn stderr() -> EventLog {
        EventLog::new(Box::new(std::io::stderr()))
    }

    /// `EVT <iso8601> <kind> unit=<i> point=<p> repeat=<r>`
    pub fn emit(&self, kind: &str, unit: &RunUnit) {
        let line = format!(
            "EVT {} {} unit={} point={} repeat={}\n",
            humantime::format_rfc3339_millis(SystemTime::now()),
            kind,
            unit.unit_index,
            unit.point_index,
            unit.repeat_index
        );
        if let Ok(mut out) = self.out.lock() {
            let _ = out.write_all(line.as_bytes());
        }
    }
}

/// Whether the coordinator keeps going after a commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    /// Stop dispatching and drop in-flight work, as if the process died.
    Interrupt,
}

pub struct ExecOptions<'a> {
    pub workers: usize,
    pub repeats: u64,
    pub max_steps: Option<u64>,
    pub events: Option<&'a EventLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOutcome {
    pub interrupted: bool,
}

enum WorkerMsg<C> {
    Started(usize),
    Done(usize, Result<C, String>),
}

/// Executes `units` on a pool of workers.
///
/// `prepare` runs on the worker that ran the unit and turns its observation
/// buffer into a commit payload; an error there fails the unit. `on_commit`
/// runs on the calling thread, once per successful unit, in completion
/// order. `ledger` may arrive with units already completed (resume).
pub fn execute<C, P, F>(
    ledger: &mut RunLedger,
    units: &[RunUnit],
    space: &ParameterSpace,
    factory: &dyn TaskFactory,
    hooks: &Hooks,
    opts: &ExecOptions<'_>,
    prepare: P,
    mut on_commit: F,
) -> ExecOutcome
where
    C: Send,
    P: Fn(&RunUnit, &ParameterPoint, Vec<Observation>) -> Result<C, String> + Sync,
    F: FnMut(&RunUnit, C, &RunLedger) -> Flow,
{
    assert!(opts.workers >= 1, "at least one worker");
    assert!(opts.repeats >= 1, "at least one repeat");

    // Remaining units per point, for the task-level time points.
    let mut remaining: BTreeMap<u64, u64> = BTreeMap::new();
    for u in units {
        *remaining.entry(u.point_index).or_default() += 1;
    }
    let mut committed_per_point: BTreeMap<u64, u64> = BTreeMap::new();
    for u in &ledger.completed {
        *committed_per_point.entry(u / opts.repeats).or_default() += 1;
    }
    let mut started_points: BTreeSet<u64> = BTreeSet::new();
    let abort = AtomicBool::new(false);
    let mut interrupted = false;

    std::thread::scope(|s| {
        let (work_tx, work_rx) = bounded::<usize>(opts.workers);
        let (res_tx, res_rx) = unbounded::<WorkerMsg<C>>();
        for _ in 0..opts.workers {
            let work_rx = work_rx.clone();
            let res_tx = res_tx.clone();
            let abort = &abort;
            let prepare = &prepare;
            s.spawn(move || {
                for idx in work_rx.iter() {
                    if abort.load(Ordering::SeqCst) {
                        continue;
                    }
                    let unit = units[idx];
                    let _ = res_tx.send(WorkerMsg::Started(idx));
                    let point = space.point(unit.point_index);
                    let result = run_unit(unit, &point, factory, hooks, opts.max_steps)
                        .and_then(|obs| prepare(&unit, &point, obs));
                    let _ = res_tx.send(WorkerMsg::Done(idx, result));
                }
            });
        }
        drop(res_tx);
        drop(work_rx);

        let mut work_tx = Some(work_tx);
        let mut next = 0usize;
        let mut outstanding = 0usize;
        loop {
            while let Some(tx) = work_tx.as_ref().filter(|_| next < units.len()) {
                let unit = &units[next];
                if started_points.insert(unit.point_index) {
                    let point = space.point(unit.point_index);
                    hooks.fire_task(&TaskEvent {
                        timepoint: TimePoint::BeforeTask,
                        point: &point,
                        committed_runs: committed_per_point.get(&unit.point_index).copied().unwrap_or(0),
                    });
                }
                match tx.try_send(next) {
                    Ok(()) => {
                        ledger.in_flight.insert(unit.unit_index);
                        next += 1;
                        outstanding += 1;
                    }
                    Err(TrySendError::Full(_)) => break,
                    Err(TrySendError::Disconnected(_)) => unreachable!("workers outlive the queue"),
                }
            }
            if next == units.len() {
                work_tx = None;
            }
            if outstanding == 0 {
                break;
            }
            let Ok(msg) = res_rx.recv() else { break };
            match msg {
                WorkerMsg::Started(idx) => {
                    if let Some(ev) = opts.events {
                        ev.emit("started", &units[idx]);
                    }
                }
                WorkerMsg::Done(idx, result) => {
                    outstanding -= 1;
                    let unit = units[idx];
                    ledger.in_flight.remove(&unit.unit_index);
                    if interrupted {
                        continue;
                    }
                    match result {
                        Ok(payload) => {
                            ledger.completed.insert(unit.unit_index);
                            *committed_per_point.entry(unit.point_index).or_default() += 1;
                            if let Some(ev) = opts.events {
                                ev.emit("committed", &unit);
                            }
                            if on_commit(&unit, payload, ledger) == Flow::Interrupt {
                                interrupted = true;
                                abort.store(true, Ordering::SeqCst);
                                work_tx = None;
                                continue;
                            }
                        }
                        Err(msg) => {
                            ledger.failed.insert(unit.unit_index, msg);
                            if let Some(ev) = opts.events {
                                ev.emit("failed", &unit);
                            }
                        }
                    }
                    let left = remaining.get_mut(&unit.point_index).unwrap();
                    *left -= 1;
                    if *left == 0 {
                        let point = space.point(unit.point_index);
                        hooks.fire_task(&TaskEvent {
                            timepoint: TimePoint::AfterTask,
                            point: &point,
                            committed_runs: committed_per_point
                                .get(&unit.point_index)
                                .copied()
                                .unwrap_or(0),
                        });
                    }
                }
            }
        }
        drop(work_tx);
    });
    ledger.in_flight.clear();
    ExecOutcome { interrupted }
}
