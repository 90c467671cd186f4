//! Experiment plans, seeded repetitions and aggregate convergence statistics.

pub mod aggregate;
pub mod plan;
pub mod runner;

pub use aggregate::{aggregate, AggregateStats};
pub use plan::{load_plan, parse_plan, ResolvedPlan, Variant};
pub use runner::{aggregate_dir, run_experiment, ExperimentReport};
