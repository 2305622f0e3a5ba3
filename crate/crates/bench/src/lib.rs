//! Benchmark driver for meta-learning under a labeling budget: experiment
//! configuration, seeded runs, confidence intervals and CSV output, plus the
//! `metalab` command line.

pub mod aggregate;
pub mod cli;
pub mod config;
pub mod run;
pub mod sweep;

pub use aggregate::{aggregate, mean_ci95, t_quantile_975, AggregateRecord};
pub use cli::{cli_main, format_value};
pub use config::{format_benchmark_id, ExperimentConfig, Labeler};
pub use run::{run_experiment, ExperimentOutcome, RunRecord, SeedRun, RESULTS_HEADER};
pub use sweep::{bounds_csv, sweep_shots, SweepOutcome, SweepPoint, BOUNDS_HEADER};
