//! Gaussian process regression with an anisotropic squared exponential kernel.
//!
//! The kernel is `k(u, v) = variance * exp(-0.5 * sum_k ((u_k - v_k) / lengthscale_k)^2)`.
//! Fitting maximizes the log marginal likelihood over the lengthscales, with the
//! constant prior mean (generalized least squares) and the kernel variance
//! profiled out in closed form.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::doe::Doe;
use crate::error::{EgorseError, Result};
use crate::optim::nelder_mead;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Settings for [`fit_gp`].
#[derive(Debug, Clone, PartialEq)]
pub struct GpFitConfig {
    /// Number of local likelihood optimizations.
    pub n_starts: usize,
    pub lengthscale_bounds: (f64, f64),
    /// Nugget relative to the kernel variance, first value tried.
    pub initial_nugget: f64,
    /// Largest relative nugget tried before giving up.
    pub max_nugget: f64,
    /// Likelihood evaluations allowed per local optimization.
    pub max_evals_per_start: usize,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        GpFitConfig {
            n_starts: 10,
            lengthscale_bounds: (1e-3, 1e3),
            initial_nugget: 1e-8,
            max_nugget: 1e-4,
            max_evals_per_start: 100,
        }
    }
}

impl GpFitConfig {
    /// Same settings with the starting nugget multiplied by `factor` (capped).
    pub fn with_escalated_nugget(&self, factor: f64) -> Self {
        let mut c = self.clone();
        c.initial_nugget = (self.initial_nugget * factor).min(self.max_nugget);
        c
    }
}

/// Kernel and prior hyperparameters. `nugget` is absolute (same units as `variance`).
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub lengthscales: Vec<f64>,
    pub variance: f64,
    pub nugget: f64,
    pub mean: f64,
}

/// A trained Gaussian process. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    hyper: Hyperparams,
    training: Doe,
    x_train: DMatrix<f64>,
    inv_sq_lengthscales: Vec<f64>,
    chol_factor: DMatrix<f64>,
    alpha: DVector<f64>,
    log_likelihood: f64,
}

/// Posterior mean and standard deviation at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
}

/// Gradients of the posterior mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGradient {
    pub grad_mean: DVector<f64>,
    pub grad_std: DVector<f64>,
    /// Set when the standard deviation vanishes and `grad_std` was zeroed.
    pub degenerate: bool,
}

fn correlation(x: &DMatrix<f64>, inv_sq: &[f64]) -> DMatrix<f64> {
    let l = x.nrows();
    let mut r = DMatrix::identity(l, l);
    for i in 0..l {
        for j in 0..i {
            let mut s = 0.0;
            for (k, w) in inv_sq.iter().enumerate() {
                let diff = x[(i, k)] - x[(j, k)];
                s += w * diff * diff;
            }
            let v = (-0.5 * s).exp();
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

fn log_det_from_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

fn check_doe(doe: &Doe) -> Result<()> {
    if let Some(y) = doe.outputs().iter().find(|y| !y.is_finite()) {
        return Err(EgorseError::NonFiniteOutput(*y));
    }
    Ok(())
}

/// Log marginal likelihood of the doe outputs under the given hyperparameters.
///
/// Returns `-inf` when the covariance cannot be factorized or hyperparameters
/// are invalid; never panics on bad input.
pub fn log_marginal_likelihood(hyper: &Hyperparams, doe: &Doe) -> f64 {
    if hyper.lengthscales.len() != doe.dim()
        || doe.is_empty()
        || hyper.variance <= 0.0
        || hyper.nugget < 0.0
        || hyper.lengthscales.iter().any(|l| !(*l > 0.0))
    {
        return f64::NEG_INFINITY;
    }
    let inv_sq: Vec<f64> = hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let x = doe.x_matrix();
    let l = x.nrows();
    let mut k = correlation(&x, &inv_sq) * hyper.variance;
    for i in 0..l {
        k[(i, i)] += hyper.nugget;
    }
    let Some(chol) = k.cholesky() else {
        return f64::NEG_INFINITY;
    };
    let r = doe.y_vector().add_scalar(-hyper.mean);
    let alpha = chol.solve(&r);
    let v = -0.5 * r.dot(&alpha) - 0.5 * log_det_from_chol(&chol) - 0.5 * l as f64 * LN_2PI;
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

/// Profiled fit at fixed lengthscales: GLS mean, closed-form variance.
struct Profiled {
    hyper: Hyperparams,
    chol_l: DMatrix<f64>,
    log_likelihood: f64,
}

fn profile(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lengthscales: &[f64],
    config: &GpFitConfig,
) -> Option<Profiled> {
    let l = x.nrows();
    let inv_sq: Vec<f64> = lengthscales.iter().map(|s| 1.0 / (s * s)).collect();
    let corr = correlation(x, &inv_sq);
    let mut eta = config.initial_nugget;
    loop {
        let mut c = corr.clone();
        for i in 0..l {
            c[(i, i)] += eta;
        }
        if let Some(chol) = c.cholesky() {
            let ones = DVector::from_element(l, 1.0);
            let ci_one = chol.solve(&ones);
            let ci_y = chol.solve(y);
            let mean = ci_y.sum() / ci_one.sum();
            let r = y.add_scalar(-mean);
            let ci_r = &ci_y - &ci_one * mean;
            let scale = 1e-14 * (1.0 + y.amax().powi(2));
            let variance = (r.dot(&ci_r) / l as f64).max(scale);
            let ll = -0.5 * r.dot(&ci_r) / variance
                - 0.5 * (l as f64 * variance.ln() + log_det_from_chol(&chol))
                - 0.5 * l as f64 * LN_2PI;
            if ll.is_finite() {
                // K = variance * C, so the factor scales by sqrt(variance).
                let chol_l = chol.l() * variance.sqrt();
                return Some(Profiled {
                    hyper: Hyperparams {
                        lengthscales: lengthscales.to_vec(),
                        variance,
                        nugget: eta * variance,
                        mean,
                    },
                    chol_l,
                    log_likelihood: ll,
                });
            }
        }
        if eta >= config.max_nugget {
            return None;
        }
        eta = (eta * 10.0).min(config.max_nugget);
    }
}

fn model_from_profile(doe: &Doe, x: DMatrix<f64>, p: Profiled) -> GpModel {
    let r = doe.y_vector().add_scalar(-p.hyper.mean);
    let alpha = p
        .chol_l
        .solve_lower_triangular(&r)
        .and_then(|v| p.chol_l.tr_solve_lower_triangular(&v))
        .expect("cholesky factor has a positive diagonal");
    GpModel {
        inv_sq_lengthscales: p.hyper.lengthscales.iter().map(|s| 1.0 / (s * s)).collect(),
        chol_factor: p.chol_l,
        hyper: p.hyper,
        training: doe.clone(),
        x_train: x,
        alpha,
        log_likelihood: p.log_likelihood,
    }
}

/// Builds a model at fixed lengthscales, profiling mean and variance.
pub fn gp_with_lengthscales(doe: &Doe, lengthscales: &[f64], config: &GpFitConfig) -> Result<GpModel> {
    check_doe(doe)?;
    if lengthscales.len() != doe.dim() {
        return Err(EgorseError::DimensionMismatch {
            expected: doe.dim(),
            got: lengthscales.len(),
        });
    }
    let x = doe.x_matrix();
    let y = doe.y_vector();
    let p = profile(&x, &y, lengthscales, config).ok_or(EgorseError::NotPositiveDefinite {
        nugget: config.max_nugget,
    })?;
    Ok(model_from_profile(doe, x, p))
}

/// Fits a GP by multi-start maximization of the log marginal likelihood.
///
/// Starts run in parallel; the winner is the highest likelihood with the
/// lowest start index breaking ties, so the result does not depend on
/// scheduling.
pub fn fit_gp<R: Rng + ?Sized>(doe: &Doe, config: &GpFitConfig, rng: &mut R) -> Result<GpModel> {
    if doe.len() < 2 {
        return Err(EgorseError::InvalidInput(format!(
            "fit_gp needs at least 2 points, got {}",
            doe.len()
        )));
    }
    check_doe(doe)?;
    let n = doe.dim();
    let x = doe.x_matrix();
    let y = doe.y_vector();
    let (lo, hi) = config.lengthscale_bounds;
    let (log_lo, log_hi) = (lo.ln(), hi.ln());

    let ranges: Vec<f64> = (0..n)
        .map(|k| {
            let col = x.column(k);
            let r = col.max() - col.min();
            if r > 0.0 {
                r
            } else {
                1.0
            }
        })
        .collect();
    let n_starts = config.n_starts.max(1);
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(n_starts);
    starts.push(ranges.iter().map(|r| (0.5 * r).ln().clamp(log_lo, log_hi)).collect());
    let seed: u64 = rng.random();
    let mut start_rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 1..n_starts {
        starts.push(
            ranges
                .iter()
                .map(|r| (r * 10f64.powf(start_rng.random_range(-2.0..1.0))).ln().clamp(log_lo, log_hi))
                .collect(),
        );
    }

    let to_lengthscales = |z: &[f64]| -> Vec<f64> { z.iter().map(|v| v.clamp(log_lo, log_hi).exp()).collect() };
    let results: Vec<(Vec<f64>, f64)> = starts
        .par_iter()
        .map(|z0| {
            nelder_mead(
                |z| match profile(&x, &y, &to_lengthscales(z), config) {
                    Some(p) => -p.log_likelihood,
                    None => f64::INFINITY,
                },
                z0,
                0.7,
                config.max_evals_per_start,
                1e-9,
            )
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, (_, v)) in results.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|(_, bv)| *v < bv) {
            best = Some((i, *v));
        }
    }
    let (best_idx, _) = best.ok_or(EgorseError::NotPositiveDefinite {
        nugget: config.max_nugget,
    })?;
    let p = profile(&x, &y, &to_lengthscales(&results[best_idx].0), config).ok_or(
        EgorseError::NotPositiveDefinite {
            nugget: config.max_nugget,
        },
    )?;
    Ok(model_from_profile(doe, x, p))
}

impl GpModel {
    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.hyper.lengthscales
    }

    pub fn kernel_variance(&self) -> f64 {
        self.hyper.variance
    }

    pub fn nugget(&self) -> f64 {
        self.hyper.nugget
    }

    pub fn prior_mean(&self) -> f64 {
        self.hyper.mean
    }

    pub fn training_doe(&self) -> &Doe {
        &self.training
    }

    pub fn input_dim(&self) -> usize {
        self.training.dim()
    }

    /// Lower-triangular factor of `K + nugget * I`.
    pub fn chol_factor(&self) -> &DMatrix<f64> {
        &self.chol_factor
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Log marginal likelihood at the fitted hyperparameters.
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    fn check_dim(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.input_dim() {
            return Err(EgorseError::DimensionMismatch {
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    fn cross_covariance(&self, u: &DVector<f64>) -> DVector<f64> {
        let l = self.x_train.nrows();
        DVector::from_fn(l, |i, _| {
            let mut s = 0.0;
            for (k, w) in self.inv_sq_lengthscales.iter().enumerate() {
                let diff = u[k] - self.x_train[(i, k)];
                s += w * diff * diff;
            }
            self.hyper.variance * (-0.5 * s).exp()
        })
    }

    fn solve_lower(&self, k: &DVector<f64>) -> DVector<f64> {
        self.chol_factor
            .solve_lower_triangular(k)
            .expect("cholesky factor has a positive diagonal")
    }

    /// Posterior mean and standard deviation (variance clipped at zero).
    pub fn predict(&self, u: &DVector<f64>) -> Result<Prediction> {
        self.check_dim(u)?;
        let k = self.cross_covariance(u);
        let mean = self.hyper.mean + k.dot(&self.alpha);
        let v = self.solve_lower(&k);
        let var = (self.hyper.variance - v.norm_squared()).max(0.0);
        Ok(Prediction { mean, std: var.sqrt() })
    }

    /// Analytic gradients of the posterior mean and standard deviation.
    pub fn predict_gradient(&self, u: &DVector<f64>) -> Result<(Prediction, PredictionGradient)> {
        self.check_dim(u)?;
        let n = self.input_dim();
        let l = self.x_train.nrows();
        let k = self.cross_covariance(u);
        // Row i of `dk` is the gradient of k(u, x_i) with respect to u.
        let dk = DMatrix::from_fn(l, n, |i, j| {
            -k[i] * (u[j] - self.x_train[(i, j)]) * self.inv_sq_lengthscales[j]
        });
        let mean = self.hyper.mean + k.dot(&self.alpha);
        let grad_mean = dk.tr_mul(&self.alpha);
        let v = self.solve_lower(&k);
        let var = (self.hyper.variance - v.norm_squared()).max(0.0);
        let std = var.sqrt();
        let degenerate = std <= 1e-12 * self.hyper.variance.sqrt();
        let grad_std = if degenerate {
            DVector::zeros(n)
        } else {
            let kinv_k = self
                .chol_factor
                .tr_solve_lower_triangular(&v)
                .expect("cholesky factor has a positive diagonal");
            -dk.tr_mul(&kinv_k) / std
        };
        Ok((
            Prediction { mean, std },
            PredictionGradient {
                grad_mean,
                grad_std,
                degenerate,
            },
        ))
    }
}
