//! Evaluation history of a run and its CSV form.

use nalgebra::DVector;

use crate::error::{EgorseError, Result};
use crate::subspace::MapKind;

pub const HISTORY_CSV_HEADER: &str = "eval_index,outer_iter,method,used_map,f_value,best_so_far,wall_clock_s";

/// Where an evaluation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    InitialDoe,
    Subspace {
        outer_iteration: usize,
        slot: usize,
        method: crate::embeddings::MethodTag,
        used_map: MapKind,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub evaluation_index: usize,
    pub full_point: DVector<f64>,
    /// Raw objective value; non-finite values count as +inf for the incumbent.
    pub f_value: f64,
    pub wall_clock_seconds: f64,
    pub origin: Origin,
    /// A supervised builder failed and a Gaussian matrix was used for this slot.
    pub builder_substituted: bool,
}

impl Record {
    pub fn outer_iteration(&self) -> Option<usize> {
        match self.origin {
            Origin::InitialDoe => None,
            Origin::Subspace { outer_iteration, .. } => Some(outer_iteration),
        }
    }
}

/// Time-stamped trace of every expensive evaluation of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    records: Vec<Record>,
    best_trace: Vec<f64>,
    /// Largest input dimension of any surrogate trained during the run.
    pub max_gp_input_dim: usize,
    /// Archive size handed to each subspace builder, one entry per slot in run order.
    pub builder_archive_sizes: Vec<usize>,
}

impl History {
    pub fn new() -> Self {
        History::default()
    }

    pub fn push(&mut self, full_point: DVector<f64>, f_value: f64, wall_clock_seconds: f64, origin: Origin, builder_substituted: bool) {
        let prev = self.best_trace.last().copied().unwrap_or(f64::INFINITY);
        let best = if f_value.is_finite() { prev.min(f_value) } else { prev };
        self.records.push(Record {
            evaluation_index: self.records.len(),
            full_point,
            f_value,
            wall_clock_seconds,
            origin,
            builder_substituted,
        });
        self.best_trace.push(best);
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn best_trace(&self) -> &[f64] {
        &self.best_trace
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.len() + 1));
        out.push_str(HISTORY_CSV_HEADER);
        out.push('\n');
        for (r, best) in self.records.iter().zip(&self.best_trace) {
            let (outer, method, map) = match r.origin {
                Origin::InitialDoe => ("-1".to_string(), "doe".to_string(), "-".to_string()),
                Origin::Subspace {
                    outer_iteration,
                    method,
                    used_map,
                    ..
                } => (outer_iteration.to_string(), method.to_string(), used_map.to_string()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.evaluation_index,
                outer,
                method,
                map,
                fmt17(r.f_value),
                fmt17(*best),
                fmt17(r.wall_clock_seconds)
            ));
        }
        out
    }
}

/// Decimal with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// The best record: minimal value, earliest index on ties.
pub fn best_point(history: &History) -> Result<(DVector<f64>, f64)> {
    let mut best: Option<&Record> = None;
    for r in history.records() {
        let v = if r.f_value.is_finite() { r.f_value } else { f64::INFINITY };
        if best.is_none_or(|b| {
            let bv = if b.f_value.is_finite() { b.f_value } else { f64::INFINITY };
            v < bv
        }) {
            best = Some(r);
        }
    }
    best.map(|r| (r.full_point.clone(), r.f_value))
        .ok_or_else(|| EgorseError::InvalidInput("empty history".into()))
}

/// One parsed line of a history CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub eval_index: usize,
    pub outer_iter: i64,
    pub method: String,
    pub used_map: String,
    pub f_value: f64,
    pub best_so_far: f64,
    pub wall_clock_s: f64,
}

pub fn parse_history_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == HISTORY_CSV_HEADER => {}
        other => {
            return Err(EgorseError::Parse(format!(
                "expected header '{HISTORY_CSV_HEADER}', found {other:?}"
            )))
        }
    }
    let num = |s: &str, line: usize| {
        s.parse::<f64>()
            .map_err(|e| EgorseError::Parse(format!("line {line}: bad number '{s}': {e}")))
    };
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lineno = k + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(EgorseError::Parse(format!("line {lineno}: expected 7 fields, got {}", f.len())));
        }
        rows.push(CsvRow {
            eval_index: f[0]
                .parse()
                .map_err(|e| EgorseError::Parse(format!("line {lineno}: bad index: {e}")))?,
            outer_iter: f[1]
                .parse()
                .map_err(|e| EgorseError::Parse(format!("line {lineno}: bad outer_iter: {e}")))?,
            method: f[2].to_string(),
            used_map: f[3].to_string(),
            f_value: num(f[4], lineno)?,
            best_so_far: num(f[5], lineno)?,
            wall_clock_s: num(f[6], lineno)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::MethodTag;

    fn sample() -> History {
        let mut h = History::new();
        h.push(DVector::zeros(2), 3.0, 0.0, Origin::InitialDoe, false);
        h.push(DVector::from_vec(vec![0.1, 0.2]), f64::NAN, 0.5, Origin::InitialDoe, false);
        h.push(
            DVector::from_vec(vec![0.3, 0.2]),
            1.0 / 3.0,
            1.25,
            Origin::Subspace {
                outer_iteration: 0,
                slot: 1,
                method: MethodTag::Gaussian,
                used_map: MapKind::W,
            },
            false,
        );
        h.push(DVector::from_vec(vec![0.3, 0.5]), 1.0 / 3.0, 1.5, Origin::InitialDoe, false);
        h
    }

    #[test]
    fn trace_and_best_point() {
        let h = sample();
        assert_eq!(h.best_trace(), &[3.0, 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let (x, v) = best_point(&h).unwrap();
        assert_eq!(v, 1.0 / 3.0);
        assert_eq!(x[1], 0.2, "earliest index wins ties");
        assert!(best_point(&History::new()).is_err());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let h = sample();
        let csv = h.to_csv();
        assert!(csv.starts_with(HISTORY_CSV_HEADER));
        let rows = parse_history_csv(&csv).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[2].f_value, 1.0 / 3.0);
        assert_eq!(rows[2].method, "gaussian");
        assert_eq!(rows[2].used_map, "W");
        assert_eq!(rows[0].outer_iter, -1);
        assert!(rows[1].f_value.is_nan());
        assert!(parse_history_csv("a,b\n").is_err());
    }
}
