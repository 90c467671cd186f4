//! Benchmark objectives: the modified Branin function and a wrapper that
//! inflates any low-dimensional function to `d` variables through a random
//! linear map.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embeddings::TransferMatrix;
use crate::error::{EgorseError, Result};

const BOX_SLACK: f64 = 1e-9;

fn check_box(x: &DVector<f64>) -> Result<()> {
    if let Some((j, v)) = x.iter().enumerate().find(|(_, v)| !(v.abs() <= 1.0 + BOX_SLACK)) {
        return Err(EgorseError::OutOfBox(format!("coordinate {j} = {v}")));
    }
    Ok(())
}

/// Modified Branin in raw coordinates on `[-5, 10] x [0, 15]`.
pub fn modified_branin_raw(x1: f64, x2: f64) -> f64 {
    let quad = x2 - 5.1 * x1 * x1 / (4.0 * PI * PI) + 5.0 * x1 / PI - 6.0;
    quad * quad + (10.0 - 10.0 / (8.0 * PI)) * x1.cos() + 10.0 + (5.0 * x1 + 25.0) / 15.0
}

/// Modified Branin on the normalized square `[-1, 1]^2`.
pub fn modified_branin(u: &DVector<f64>) -> Result<f64> {
    if u.len() != 2 {
        return Err(EgorseError::DimensionMismatch { expected: 2, got: u.len() });
    }
    check_box(u)?;
    let x1 = 2.5 + 7.5 * u[0];
    let x2 = 7.5 + 7.5 * u[1];
    Ok(modified_branin_raw(x1, x2))
}

/// Objective on `[-1, 1]^d_base`.
pub type BaseFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// `x -> base(A_d x)` with `A_d x` in `[-1, 1]^d_base` for every `x` in `[-1, 1]^d`.
pub struct EmbeddedProblem {
    name: String,
    base: BaseFn,
    inflation_matrix: DMatrix<f64>,
    seed: u64,
    evaluations: AtomicU64,
}

impl fmt::Debug for EmbeddedProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddedProblem")
            .field("name", &self.name)
            .field("d_base", &self.d_base())
            .field("d", &self.d())
            .field("seed", &self.seed)
            .field("evaluations", &self.evaluation_count())
            .finish()
    }
}

/// Wraps `base` (defined on `[-1,1]^d_base`) into a `d`-dimensional problem.
///
/// Rows of the inflation matrix are Gaussian draws rescaled to unit absolute sum.
pub fn inflate(base: BaseFn, d_base: usize, d: usize, seed: u64) -> Result<EmbeddedProblem> {
    if d_base == 0 || d <= d_base {
        return Err(EgorseError::InvalidInput(format!(
            "inflated dimension {d} must exceed base dimension {d_base}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..d_base * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut m = DMatrix::from_row_slice(d_base, d, &values);
    for mut row in m.row_iter_mut() {
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        row /= s;
    }
    EmbeddedProblem::from_matrix(format!("inflated_{d}"), base, m, seed)
}

/// Modified Branin inflated to `d` variables.
pub fn mb(d: usize, seed: u64) -> Result<EmbeddedProblem> {
    let base: BaseFn = Arc::new(|u: &DVector<f64>| modified_branin(u).unwrap_or(f64::NAN));
    let mut p = inflate(base, 2, d, seed)?;
    p.name = format!("mb_{d}");
    Ok(p)
}

impl EmbeddedProblem {
    /// Uses a given inflation matrix; every row must have absolute sum at most 1.
    pub fn from_matrix(name: String, base: BaseFn, inflation_matrix: DMatrix<f64>, seed: u64) -> Result<Self> {
        for (i, row) in inflation_matrix.row_iter().enumerate() {
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if !(s <= 1.0 + 1e-12) {
                return Err(EgorseError::InvalidInput(format!(
                    "row {i} of the inflation matrix has absolute sum {s} > 1"
                )));
            }
        }
        if inflation_matrix.ncols() <= inflation_matrix.nrows() {
            return Err(EgorseError::InvalidInput("inflation matrix must be wide".into()));
        }
        Ok(EmbeddedProblem {
            name,
            base,
            inflation_matrix,
            seed,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d(&self) -> usize {
        self.inflation_matrix.ncols()
    }

    pub fn d_base(&self) -> usize {
        self.inflation_matrix.nrows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn inflation_matrix(&self) -> &DMatrix<f64> {
        &self.inflation_matrix
    }

    /// Reduced point `A_d x`, clipped against rounding to `[-1, 1]`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        (&self.inflation_matrix * x).map(|v| v.clamp(-1.0, 1.0))
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.d() {
            return Err(EgorseError::DimensionMismatch {
                expected: self.d(),
                got: x.len(),
            });
        }
        check_box(x)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        Ok((self.base)(&self.project(x)))
    }

    pub fn evaluation_count(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_count(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }
}

/// Resolves `mb_<d>` (e.g. `mb_10`, `mb_100`, `mb_600`) or `custom:<path>`.
///
/// Custom problems read a `2 x d` inflation matrix in the transfer matrix text
/// format and compose it with the modified Branin function.
pub fn problem_by_name(name: &str, seed: u64) -> Result<EmbeddedProblem> {
    if let Some(path) = name.strip_prefix("custom:") {
        let text = std::fs::read_to_string(Path::new(path))?;
        let tm = TransferMatrix::from_text(&text)?;
        if tm.d_e() != 2 {
            return Err(EgorseError::InvalidInput(format!(
                "custom inflation matrix must have 2 rows, got {}",
                tm.d_e()
            )));
        }
        let base: BaseFn = Arc::new(|u: &DVector<f64>| modified_branin(u).unwrap_or(f64::NAN));
        return EmbeddedProblem::from_matrix(name.to_string(), base, tm.entries().clone(), tm.seed());
    }
    if let Some(d) = name.strip_prefix("mb_") {
        let d: usize = d
            .parse()
            .map_err(|_| EgorseError::InvalidInput(format!("unknown problem '{name}'")))?;
        return mb(d, seed);
    }
    Err(EgorseError::InvalidInput(format!("unknown problem '{name}'")))
}
