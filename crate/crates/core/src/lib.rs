//! Parameter sweeps for simulation experiments.
//!
//! A plain-text [config](config) declares parameters, repeats and
//! aggregation rules. The [engine] runs the task once per run unit on a
//! worker pool, [aggregate] folds the recorded values into per-cell
//! statistics in a fixed order, [checkpoint] makes the run resumable, and
//! [plot] writes Gnuplot data files and scripts. [session] ties these
//! together; [netstruct] and [demo] provide network structures and a SIR
//! epidemic task built on them.
//!
//! ```
//! use sweepforge::{demo, parse_config, session};
//!
//! let cfg = parse_config(
//!     "[task]\nname = quick\nrepeats = 2\n\
//!      [params]\nn = 20\nbeta = {0.2, 0.4}\ngamma = 0.5\n\
//!      [aggregate]\nfinal : mean, stderr @ after_run by beta\n",
//! )
//! .unwrap();
//! let out = tempfile::tempdir().unwrap();
//! let registry = demo::demo_registry();
//! let summary = session::run(&cfg, registry.get("sir").unwrap(), &session::SessionOptions::new(out.path())).unwrap();
//! assert_eq!((summary.completed, summary.cells), (4, 2));
//! ```

pub mod aggregate;
pub mod checkpoint;
pub mod config;
pub mod demo;
pub mod engine;
pub mod expr;
pub mod netstruct;
pub mod num;
pub mod plot;
pub mod session;

pub use aggregate::{AggState, AggregationRule, CellKey, PartialStat, ResultTable, Stat};
pub use checkpoint::{Checkpoint, CheckpointError, CheckpointStore};
pub use config::{parse_config, Config, ConfigErrors, ParamValue, ParameterPoint, ParameterSpace};
pub use engine::{derive_seed, plan, Hooks, RunContext, RunUnit, TaskLogic, TaskResult, TimePoint};
pub use expr::{Expr, Value};
pub use netstruct::{NetworkSet, StateBag};
pub use session::{RegisteredTask, SessionOptions, Summary, TaskRegistry};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/config.md")]
    mod config {}
    #[doc = include_str!("../../../book/src/tasks.md")]
    mod tasks {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/plotting.md")]
    mod plotting {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/sir.md")]
    mod sir {}
}
