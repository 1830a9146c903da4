//! Experiment driver: config, training loop, gradient and oracle checks, plots.

pub mod config;
pub mod gradcheck;
pub mod oracle;
pub mod plot;
pub mod train;

pub use config::ExperimentConfig;
pub use gradcheck::{gradcheck, GradcheckReport};
pub use oracle::{run_oracle, OracleKind, OracleReport};
pub use plot::{collect_runs, render_curves, RunCurve};
pub use train::{run_experiment, train_protocol, RunResult};
