//! Statistics of best-so-far traces across repeated runs.

use std::path::{Path, PathBuf};

use egorse::history::{fmt17, parse_history_csv};
use egorse::{EgorseError, Result};

pub const AGGREGATE_CSV_HEADER: &str = "eval_index,mean_best,std_best,std_best_div4,mean_wall_clock_s";

/// Per-evaluation-index mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateStats {
    pub mean_best: Vec<f64>,
    pub std_best: Vec<f64>,
    /// `std_best / 4`, the band width drawn in convergence plots.
    pub std_best_div4: Vec<f64>,
    pub mean_wall_clock: Vec<f64>,
    pub runs: usize,
}

impl AggregateStats {
    pub fn len(&self) -> usize {
        self.mean_best.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_best.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(AGGREGATE_CSV_HEADER);
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                fmt17(self.mean_best[i]),
                fmt17(self.std_best[i]),
                fmt17(self.std_best_div4[i]),
                fmt17(self.mean_wall_clock[i])
            ));
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return (first, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates traces given as `(best_so_far, wall_clock)` per run.
pub fn aggregate_traces(traces: &[(Vec<f64>, Vec<f64>)]) -> Result<AggregateStats> {
    let Some(first) = traces.first() else {
        return Err(EgorseError::InvalidInput("no runs to aggregate".into()));
    };
    let n = first.0.len();
    for (k, (best, clock)) in traces.iter().enumerate() {
        if best.len() != n || clock.len() != n {
            return Err(EgorseError::InvalidInput(format!(
                "run {k} has {} evaluations, run 0 has {n}; budgets differ between runs",
                best.len()
            )));
        }
    }
    let mut stats = AggregateStats {
        mean_best: Vec::with_capacity(n),
        std_best: Vec::with_capacity(n),
        std_best_div4: Vec::with_capacity(n),
        mean_wall_clock: Vec::with_capacity(n),
        runs: traces.len(),
    };
    let mut column = Vec::with_capacity(traces.len());
    for i in 0..n {
        column.clear();
        column.extend(traces.iter().map(|t| t.0[i]));
        let (m, s) = mean_std(&column);
        stats.mean_best.push(m);
        stats.std_best.push(s);
        stats.std_best_div4.push(s / 4.0);
        column.clear();
        column.extend(traces.iter().map(|t| t.1[i]));
        stats.mean_wall_clock.push(mean_std(&column).0);
    }
    Ok(stats)
}

/// Aggregates history CSV files.
pub fn aggregate(files: &[PathBuf]) -> Result<AggregateStats> {
    let mut traces = Vec::with_capacity(files.len());
    for path in files {
        let text = std::fs::read_to_string(path)?;
        let rows = parse_history_csv(&text)
            .map_err(|e| EgorseError::Parse(format!("{}: {e}", path.display())))?;
        traces.push((
            rows.iter().map(|r| r.best_so_far).collect(),
            rows.iter().map(|r| r.wall_clock_s).collect(),
        ));
    }
    aggregate_traces(&traces).map_err(|e| match e {
        EgorseError::InvalidInput(m) if !files.is_empty() => EgorseError::InvalidInput(format!(
            "{m} (files: {})",
            files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>().join(", ")
        )),
        e => e,
    })
}

/// History files of a directory: every `*.csv` except `aggregate.csv`, sorted.
pub fn history_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != "aggregate.csv")
        })
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_constant_runs() {
        let s = aggregate_traces(&[(vec![3.0; 4], vec![0.0; 4]), (vec![5.0; 4], vec![1.0; 4])]).unwrap();
        assert_eq!(s.mean_best, vec![4.0; 4]);
        assert_eq!(s.std_best, vec![1.0; 4]);
        assert_eq!(s.std_best_div4, vec![0.25; 4]);
        assert_eq!(s.mean_wall_clock, vec![0.5; 4]);
    }

    #[test]
    fn identical_runs_have_zero_spread() {
        let t = (vec![0.1, 0.1, 0.07], vec![0.0; 3]);
        let s = aggregate_traces(&[t.clone(), t.clone(), t]).unwrap();
        assert_eq!(s.std_best, vec![0.0; 3]);
        assert_eq!(s.mean_best, vec![0.1, 0.1, 0.07]);
    }

    #[test]
    fn length_mismatch() {
        assert!(aggregate_traces(&[(vec![1.0; 3], vec![0.0; 3]), (vec![1.0; 2], vec![0.0; 2])]).is_err());
        assert!(aggregate_traces(&[]).is_err());
    }
}
