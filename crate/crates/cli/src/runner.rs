//! Executes the repetitions of a plan and writes their histories.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use egorse::{run_egorse, EgorseError, History, Result};
use nalgebra::DVector;
use rayon::prelude::*;

use crate::aggregate::{aggregate_traces, AggregateStats};
use crate::plan::ResolvedPlan;

/// Environment variable overriding the worker count of a plan.
pub const WORKERS_ENV: &str = "EGORSE_WORKERS";

#[derive(Debug)]
pub struct ExperimentReport {
    pub run_files: Vec<PathBuf>,
    /// `(repetition, message)` for every run that failed.
    pub failures: Vec<(usize, String)>,
    pub aggregate: Option<AggregateStats>,
    pub aggregate_file: Option<PathBuf>,
}

impl ExperimentReport {
    pub fn is_success(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn run_file_name(repetition: usize) -> String {
    format!("run_{repetition:03}.csv")
}

/// Worker count: the environment override, then the plan, then the number
/// of available cores.
pub fn worker_count(plan: &ResolvedPlan) -> Result<usize> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(EgorseError::Plan(format!("{WORKERS_ENV}: '{v}' is not a positive integer"))),
        };
    }
    Ok(plan
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())))
}

/// One repetition, isolated from the others.
pub fn run_repetition(plan: &ResolvedPlan, repetition: usize) -> Result<History> {
    let problem = plan.build_problem()?;
    let config = plan.config_for(repetition);
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        run_egorse(|x: &DVector<f64>| problem.evaluate(x).unwrap_or(f64::NAN), &config)
    }));
    let history = outcome.map_err(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown panic".into());
        EgorseError::InvalidInput(format!("run panicked: {msg}"))
    })??;
    if history.len() != config.total_evaluations() || problem.evaluation_count() as usize != history.len() {
        return Err(EgorseError::InvalidInput(format!(
            "budget mismatch: {} records, {} objective calls, {} planned",
            history.len(),
            problem.evaluation_count(),
            config.total_evaluations()
        )));
    }
    Ok(history)
}

/// Runs every repetition, writes `run_XXX.csv` files, `aggregate.csv` and,
/// when some runs fail, `errors.txt`.
pub fn run_experiment(plan: &ResolvedPlan) -> Result<ExperimentReport> {
    let workers = worker_count(plan)?;
    std::fs::create_dir_all(&plan.output_dir)?;
    let stale = plan.output_dir.join("errors.txt");
    if stale.exists() {
        std::fs::remove_file(&stale)?;
    }
    log::info!(
        "{} x {} on {} with {} worker(s)",
        plan.repetitions,
        plan.variant,
        plan.problem,
        workers
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| EgorseError::InvalidInput(format!("thread pool: {e}")))?;
    let outcomes: Vec<(usize, Result<(PathBuf, History)>)> = pool.install(|| {
        (0..plan.repetitions)
            .into_par_iter()
            .map(|r| {
                let outcome = run_repetition(plan, r).and_then(|h| {
                    let path = plan.output_dir.join(run_file_name(r));
                    std::fs::write(&path, h.to_csv())?;
                    Ok((path, h))
                });
                match &outcome {
                    Ok((_, h)) => log::info!("run {r}: best {}", h.best_trace().last().copied().unwrap_or(f64::NAN)),
                    Err(e) => log::error!("run {r} failed: {e}"),
                }
                (r, outcome)
            })
            .collect()
    });

    let mut report = ExperimentReport {
        run_files: Vec::new(),
        failures: Vec::new(),
        aggregate: None,
        aggregate_file: None,
    };
    let mut traces = Vec::new();
    for (r, outcome) in outcomes {
        match outcome {
            Ok((path, h)) => {
                report.run_files.push(path);
                let clock = h.records().iter().map(|rec| rec.wall_clock_seconds).collect();
                traces.push((h.best_trace().to_vec(), clock));
            }
            Err(e) => report.failures.push((r, e.to_string())),
        }
    }
    if !report.failures.is_empty() {
        let manifest: String = report
            .failures
            .iter()
            .map(|(r, m)| format!("{}\t{m}\n", run_file_name(*r)))
            .collect();
        std::fs::write(&stale, manifest)?;
    }
    if !traces.is_empty() {
        let stats = aggregate_traces(&traces)?;
        let path = plan.output_dir.join("aggregate.csv");
        std::fs::write(&path, stats.to_csv())?;
        report.aggregate = Some(stats);
        report.aggregate_file = Some(path);
    }
    Ok(report)
}

/// Aggregates every history file of `dir` into `dir/aggregate.csv`.
pub fn aggregate_dir(dir: &Path) -> Result<(AggregateStats, PathBuf)> {
    let files = crate::aggregate::history_files(dir)?;
    let stats = crate::aggregate::aggregate(&files)?;
    let path = dir.join("aggregate.csv");
    std::fs::write(&path, stats.to_csv())?;
    Ok((stats, path))
}
