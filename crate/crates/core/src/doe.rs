//! Archive of evaluated points and the Latin hypercube sampler used to seed it.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{EgorseError, Result};

/// Points closer than this are considered identical.
pub const DUPLICATE_DISTANCE: f64 = 1e-12;

/// Design of experiments: evaluated points and their outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Doe {
    dim: usize,
    points: Vec<DVector<f64>>,
    outputs: Vec<f64>,
}

impl Doe {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(EgorseError::InvalidInput("doe dimension must be >= 1".into()));
        }
        Ok(Doe {
            dim,
            points: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Builds a doe from rows, rejecting duplicates and non-finite outputs.
    pub fn from_points(points: Vec<DVector<f64>>, outputs: Vec<f64>) -> Result<Self> {
        if points.len() != outputs.len() {
            return Err(EgorseError::InvalidInput(format!(
                "{} points but {} outputs",
                points.len(),
                outputs.len()
            )));
        }
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        let mut doe = Doe::new(dim)?;
        for (p, y) in points.into_iter().zip(outputs) {
            doe.push(p, y)?;
        }
        Ok(doe)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// Index and distance of the closest stored point.
    pub fn nearest(&self, x: &DVector<f64>) -> Option<(usize, f64)> {
        self.points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - x).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Appends a point; duplicates and non-finite outputs are rejected.
    pub fn push(&mut self, x: DVector<f64>, y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(EgorseError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if !y.is_finite() {
            return Err(EgorseError::NonFiniteOutput(y));
        }
        if let Some((index, distance)) = self.nearest(&x) {
            if distance <= DUPLICATE_DISTANCE {
                return Err(EgorseError::DuplicatePoint { index, distance });
            }
        }
        self.points.push(x);
        self.outputs.push(y);
        Ok(())
    }

    /// Appends a point unless it duplicates a stored one; returns whether it was added.
    pub fn merge(&mut self, x: DVector<f64>, y: f64) -> Result<bool> {
        match self.push(x, y) {
            Ok(()) => Ok(true),
            Err(EgorseError::DuplicatePoint { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    }

    /// Smallest output (y_min).
    pub fn min_output(&self) -> Option<f64> {
        self.outputs.iter().copied().min_by(f64::total_cmp)
    }

    /// Points as an l x n matrix (rows are samples).
    pub fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim, |i, j| self.points[i][j])
    }

    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.outputs)
    }
}

/// Latin hypercube sample of `n` points in the box `[lower, upper]`.
///
/// Each coordinate range is cut into `n` strata; every stratum is hit exactly
/// once per coordinate, with a uniform jitter inside the stratum.
pub fn latin_hypercube<R: Rng + ?Sized>(
    n: usize,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let dim = lower.len();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        let width = (upper[j] - lower[j]) / n as f64;
        columns.push(
            strata
                .into_iter()
                .map(|s| lower[j] + (s as f64 + rng.random::<f64>()) * width)
                .collect(),
        );
    }
    (0..n)
        .map(|i| DVector::from_fn(dim, |j, _| columns[j][i]))
        .collect()
}

/// Latin hypercube sample in the symmetric box `[-1, 1]^dim`.
pub fn latin_hypercube_unit<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<DVector<f64>> {
    latin_hypercube(
        n,
        &DVector::from_element(dim, -1.0),
        &DVector::from_element(dim, 1.0),
        rng,
    )
}
