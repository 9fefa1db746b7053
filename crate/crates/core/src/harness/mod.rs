//! Continual-learning driver, metrics, persistence and the gradient suite
//! behind the command-line tool.

pub mod config;
pub mod driver;
pub mod gradsuite;
pub mod metrics;
pub mod persist;
pub mod sweep;

pub use config::{load_config, parse_config, ModelDims, RunConfig, Strategy, TrainConfig};
pub use driver::{evaluate_batch, run_task, Event, Learner, MvpState, RunState};
pub use gradsuite::{gradient_suite, SuiteEntry};
pub use metrics::{compute_metrics, FamilyMetrics, MetricsReport, PerfMatrix, TaskMetrics};
pub use persist::{load_checkpoint, run_stream, save_checkpoint, Checkpoint, RunOptions, RunOutput};
pub use sweep::{find_runs, mean_last_by_experts, report_dir, sweep_experts, SweepPoint};
