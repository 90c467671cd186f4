//! Builders for the linear maps from the full design space to a reduced space.
//!
//! Two builders are unsupervised (Gaussian, hash) and two learn from the
//! evaluated points (partial least squares, marginal GP).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::doe::Doe;
use crate::error::{EgorseError, Result};
use crate::gp::{fit_gp, GpFitConfig, Hyperparams};

/// How a transfer matrix was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodTag {
    Gaussian,
    Hash,
    Pls,
    Mgp,
}

impl MethodTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodTag::Gaussian => "gaussian",
            MethodTag::Hash => "hash",
            MethodTag::Pls => "pls",
            MethodTag::Mgp => "mgp",
        }
    }

    /// Whether the builder learns from the evaluated archive.
    pub fn is_supervised(&self) -> bool {
        matches!(self, MethodTag::Pls | MethodTag::Mgp)
    }
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodTag {
    type Err = EgorseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(MethodTag::Gaussian),
            "hash" => Ok(MethodTag::Hash),
            "pls" => Ok(MethodTag::Pls),
            "mgp" => Ok(MethodTag::Mgp),
            other => Err(EgorseError::Parse(format!("unknown method tag '{other}'"))),
        }
    }
}

/// A `d_e x d` linear map; rows are the reduced directions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    entries: DMatrix<f64>,
    method: MethodTag,
    seed: u64,
}

const PLS_RANK_TOL: f64 = 1e-10;

impl TransferMatrix {
    /// Wraps `entries` after checking the structural invariants for `method`.
    pub fn new(entries: DMatrix<f64>, method: MethodTag, seed: u64) -> Result<Self> {
        let (d_e, d) = entries.shape();
        if d_e == 0 || d_e >= d {
            return Err(EgorseError::BadReducedDimension { d, d_e });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(EgorseError::InvalidInput("transfer matrix has non-finite entries".into()));
        }
        for (i, row) in entries.row_iter().enumerate() {
            if row.iter().all(|v| *v == 0.0) {
                return Err(EgorseError::InvalidInput(format!("row {i} of the transfer matrix is zero")));
            }
        }
        match method {
            MethodTag::Hash => {
                for (j, col) in entries.column_iter().enumerate() {
                    let nonzero: Vec<f64> = col.iter().copied().filter(|v| *v != 0.0).collect();
                    if nonzero.len() != 1 || nonzero[0].abs() != 1.0 {
                        return Err(EgorseError::InvalidInput(format!(
                            "hash column {j} must hold exactly one +-1 entry"
                        )));
                    }
                }
            }
            MethodTag::Pls => {
                let sv = entries.clone().singular_values();
                let max = sv.max();
                if sv.iter().any(|s| *s <= PLS_RANK_TOL * max) {
                    return Err(EgorseError::RankDeficient(format!(
                        "pls matrix singular values {:?}",
                        sv.as_slice()
                    )));
                }
            }
            MethodTag::Gaussian | MethodTag::Mgp => {}
        }
        Ok(TransferMatrix { entries, method, seed })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn method(&self) -> MethodTag {
        self.method
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Full dimension `d`.
    pub fn d(&self) -> usize {
        self.entries.ncols()
    }

    /// Reduced dimension `d_e`.
    pub fn d_e(&self) -> usize {
        self.entries.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.entries * x
    }

    /// Plain-text form: a `d_e d method seed` header, then one line per row.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {} {}\n", self.d_e(), self.d(), self.method, self.seed);
        for row in self.entries.row_iter() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| EgorseError::Parse("empty transfer matrix file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(EgorseError::Parse(format!("bad header '{header}'")));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| EgorseError::Parse(format!("bad header field '{s}': {e}")))
        };
        let d_e = parse_usize(fields[0])?;
        let d = parse_usize(fields[1])?;
        let method: MethodTag = fields[2].parse()?;
        let seed = fields[3]
            .parse::<u64>()
            .map_err(|e| EgorseError::Parse(format!("bad seed '{}': {e}", fields[3])))?;
        let mut values = Vec::with_capacity(d_e * d);
        for i in 0..d_e {
            let line = lines
                .next()
                .ok_or_else(|| EgorseError::Parse(format!("missing row {i}")))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| EgorseError::Parse(format!("bad entry '{t}': {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != d {
                return Err(EgorseError::Parse(format!("row {i} has {} entries, expected {d}", row.len())));
            }
            values.extend(row);
        }
        if lines.next().is_some() {
            return Err(EgorseError::Parse("trailing rows after matrix".into()));
        }
        TransferMatrix::new(DMatrix::from_row_slice(d_e, d, &values), method, seed)
    }
}

fn check_dims(d: usize, d_e: usize) -> Result<()> {
    if d_e == 0 || d_e >= d {
        return Err(EgorseError::BadReducedDimension { d, d_e });
    }
    Ok(())
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // Row-major fill so the stream order does not depend on storage layout.
    let values: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

/// Random matrix with i.i.d. standard normal entries.
pub fn gaussian_embedding<R: Rng + ?Sized>(d: usize, d_e: usize, rng: &mut R) -> Result<TransferMatrix> {
    check_dims(d, d_e)?;
    TransferMatrix::new(gaussian_matrix(d_e, d, rng), MethodTag::Gaussian, 0)
}

/// Sparse signed-indicator matrix: each full coordinate is hashed to one row with a random sign.
pub fn hash_embedding<R: Rng + ?Sized>(d: usize, d_e: usize, rng: &mut R) -> Result<TransferMatrix> {
    check_dims(d, d_e)?;
    loop {
        let rows: Vec<usize> = (0..d).map(|_| rng.random_range(0..d_e)).collect();
        let signs: Vec<f64> = (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut owned = vec![false; d_e];
        rows.iter().for_each(|r| owned[*r] = true);
        if !owned.iter().all(|o| *o) {
            continue;
        }
        let mut m = DMatrix::zeros(d_e, d);
        for j in 0..d {
            m[(rows[j], j)] = signs[j];
        }
        return TransferMatrix::new(m, MethodTag::Hash, 0);
    }
}

/// Intermediate quantities of the NIPALS recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct PlsState {
    /// Deflated inputs after the last component (l x d).
    pub residual_inputs: DMatrix<f64>,
    pub residual_outputs: DVector<f64>,
    /// Unit weight vectors, one column per component (d x k).
    pub directions: DMatrix<f64>,
    /// Scores `t = X w`, one column per component (l x k).
    pub scores: DMatrix<f64>,
    /// Input loadings (d x k).
    pub x_loadings: DMatrix<f64>,
    pub y_loadings: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlsEmbedding {
    pub matrix: TransferMatrix,
    pub state: PlsState,
    /// Rows filled with Gaussian draws because the covariance vanished early.
    pub padded_rows: usize,
}

/// Covariance criterion maximized by each PLS weight: `(y^T X a)^2`.
pub fn pls_objective(x: &DMatrix<f64>, y: &DVector<f64>, a: &DVector<f64>) -> f64 {
    (x * a).dot(y).powi(2)
}

/// Mean-centered copies of the archive inputs and outputs.
pub fn centered(doe: &Doe) -> (DMatrix<f64>, DVector<f64>) {
    let mut x = doe.x_matrix();
    let l = x.nrows() as f64;
    for mut col in x.column_iter_mut() {
        let m = col.sum() / l;
        col.add_scalar_mut(-m);
    }
    let y = doe.y_vector();
    let ym = y.sum() / l;
    (x, y.add_scalar(-ym))
}

/// Supervised embedding from partial least squares on the archive.
///
/// The returned transfer matrix is `(W (P^T W)^-1)^T`, mapping raw inputs to
/// PLS scores.
pub fn pls_embedding<R: Rng + ?Sized>(doe: &Doe, d_e: usize, rng: &mut R) -> Result<PlsEmbedding> {
    let d = doe.dim();
    check_dims(d, d_e)?;
    if doe.len() < d_e + 1 {
        return Err(EgorseError::InvalidInput(format!(
            "pls needs at least {} points, got {}",
            d_e + 1,
            doe.len()
        )));
    }
    let (mut x, mut y) = centered(doe);
    let y_scale = y.amax();
    if y_scale == 0.0 || !y_scale.is_finite() {
        return Err(EgorseError::ConstantOutputs);
    }
    let l = x.nrows();
    let mut directions = DMatrix::zeros(d, 0);
    let mut scores = DMatrix::zeros(l, 0);
    let mut x_loadings = DMatrix::zeros(d, 0);
    let mut y_loadings = Vec::new();
    for i in 0..d_e {
        let xty = x.tr_mul(&y);
        let norm = xty.norm();
        if norm < 1e-14 * y_scale.max(1.0) {
            if i == 0 {
                return Err(EgorseError::ConstantOutputs);
            }
            break;
        }
        let w = xty / norm;
        let t = &x * &w;
        let tt = t.norm_squared();
        let p = x.tr_mul(&t) / tt;
        let c = y.dot(&t) / tt;
        x -= &t * p.transpose();
        y -= &t * c;
        let k = directions.ncols();
        directions = directions.insert_column(k, 0.0);
        directions.set_column(k, &w);
        scores = scores.insert_column(k, 0.0);
        scores.set_column(k, &t);
        x_loadings = x_loadings.insert_column(k, 0.0);
        x_loadings.set_column(k, &p);
        y_loadings.push(c);
    }
    let k = directions.ncols();
    let ptw = x_loadings.tr_mul(&directions);
    let ptw_inv = ptw
        .try_inverse()
        .ok_or_else(|| EgorseError::RankDeficient("P^T W is singular".into()))?;
    let rotations = &directions * ptw_inv;
    let mut entries = rotations.transpose();
    let padded_rows = d_e - k;
    if padded_rows > 0 {
        let extra = gaussian_matrix(padded_rows, d, rng);
        entries = entries.insert_rows(k, padded_rows, 0.0);
        entries.view_mut((k, 0), (padded_rows, d)).copy_from(&extra);
    }
    let matrix = TransferMatrix::new(entries, MethodTag::Pls, 0)?;
    Ok(PlsEmbedding {
        matrix,
        state: PlsState {
            residual_inputs: x,
            residual_outputs: y,
            directions,
            scores,
            x_loadings,
            y_loadings,
        },
        padded_rows,
    })
}

/// How GP hyperparameters are treated during the MAP search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HyperparamMode {
    /// Refit by maximum likelihood every `every` ascent steps.
    Profile { every: usize },
    /// Fit once at the prior mean and keep them.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgpConfig {
    /// Prior mean `A_p`; a Gaussian draw when absent.
    pub prior_mean: Option<DMatrix<f64>>,
    /// Isotropic prior standard deviation on every entry.
    pub prior_std: f64,
    pub map_iterations: usize,
    pub map_tolerance: f64,
    pub n_starts: usize,
    pub hyperparams: HyperparamMode,
    /// Keep only the best-valued points of large archives.
    pub max_points: Option<usize>,
    /// Also compute the Laplace posterior covariance.
    pub compute_covariance: bool,
    /// Newton refinements of the best ascent result (0 disables them).
    pub newton_steps: usize,
    pub gp: GpFitConfig,
}

impl Default for MgpConfig {
    fn default() -> Self {
        MgpConfig {
            prior_mean: None,
            prior_std: 1.0,
            map_iterations: 200,
            map_tolerance: 1e-3,
            n_starts: 3,
            hyperparams: HyperparamMode::Profile { every: 5 },
            max_points: Some(100),
            compute_covariance: false,
            newton_steps: 5,
            gp: GpFitConfig {
                n_starts: 3,
                ..GpFitConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgpResult {
    pub matrix: TransferMatrix,
    pub map_matrix: DMatrix<f64>,
    /// Negative inverse Hessian of the log posterior over row-major `vec(A)`.
    pub posterior_covariance: Option<DMatrix<f64>>,
    pub gradient_norm_at_map: f64,
    pub log_posterior: f64,
    pub prior_log_posterior: f64,
    /// GP hyperparameters the posterior was evaluated with at the MAP.
    pub hyperparams: Hyperparams,
    /// No start improved on the prior mean, which is returned instead.
    pub fell_back_to_prior: bool,
}

fn reduced_doe(a: &DMatrix<f64>, x: &DMatrix<f64>, y: &[f64]) -> Option<Doe> {
    let u = x * a.transpose();
    let points: Vec<DVector<f64>> = u.row_iter().map(|r| r.transpose()).collect();
    Doe::from_points(points, y.to_vec()).ok()
}

/// Log posterior `log p(A) + log L(Y | A x)` at fixed GP hyperparameters,
/// together with its gradient with respect to `A`.
pub fn mgp_log_posterior_and_gradient(
    a: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    prior_mean: &DMatrix<f64>,
    prior_std: f64,
    hyper: &Hyperparams,
) -> (f64, DMatrix<f64>) {
    let diff = a - prior_mean;
    let s2 = prior_std * prior_std;
    let log_prior = -0.5 * diff.norm_squared() / s2;
    let grad_prior = -&diff / s2;

    let l = x.nrows();
    let d_e = a.nrows();
    let u = x * a.transpose();
    let inv_sq: Vec<f64> = hyper.lengthscales.iter().map(|s| 1.0 / (s * s)).collect();
    let mut kk = DMatrix::zeros(l, l);
    for i in 0..l {
        kk[(i, i)] = hyper.variance;
        for j in 0..i {
            let mut s = 0.0;
            for k in 0..d_e {
                let diff = u[(i, k)] - u[(j, k)];
                s += inv_sq[k] * diff * diff;
            }
            let v = hyper.variance * (-0.5 * s).exp();
            kk[(i, j)] = v;
            kk[(j, i)] = v;
        }
    }
    let mut k_noisy = kk.clone();
    for i in 0..l {
        k_noisy[(i, i)] += hyper.nugget;
    }
    let Some(chol) = k_noisy.cholesky() else {
        return (f64::NEG_INFINITY, DMatrix::zeros(a.nrows(), a.ncols()));
    };
    let r = y.add_scalar(-hyper.mean);
    let alpha = chol.solve(&r);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ll = -0.5 * r.dot(&alpha) - 0.5 * log_det - 0.5 * l as f64 * (2.0 * std::f64::consts::PI).ln();
    let k_inv = chol.inverse();
    // dLL/dK = (alpha alpha^T - K^-1) / 2
    let w = (&alpha * alpha.transpose() - k_inv) * 0.5;
    let mut grad_ll = DMatrix::zeros(d_e, a.ncols());
    for k in 0..d_e {
        // M_ij = W_ij K_ij (-(u_ik - u_jk) / l_k^2) is antisymmetric, so
        // sum_ij M_ij (x_i - x_j) = 2 X^T (M 1).
        let mut row_sums = DVector::zeros(l);
        for i in 0..l {
            let mut s = 0.0;
            for j in 0..l {
                if i != j {
                    s += w[(i, j)] * kk[(i, j)] * (-(u[(i, k)] - u[(j, k)]) * inv_sq[k]);
                }
            }
            row_sums[i] = 2.0 * s;
        }
        let g = x.tr_mul(&row_sums);
        grad_ll.set_row(k, &g.transpose());
    }
    let value = log_prior + ll;
    if value.is_finite() {
        (value, grad_prior + grad_ll)
    } else {
        (f64::NEG_INFINITY, DMatrix::zeros(a.nrows(), a.ncols()))
    }
}

struct MgpProblem<'a> {
    x: DMatrix<f64>,
    y: DVector<f64>,
    y_raw: Vec<f64>,
    prior_mean: &'a DMatrix<f64>,
    config: &'a MgpConfig,
    fit_seed: u64,
}

impl MgpProblem<'_> {
    fn fit_hyper(&self, a: &DMatrix<f64>) -> Option<Hyperparams> {
        let doe = reduced_doe(a, &self.x, &self.y_raw)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.fit_seed);
        fit_gp(&doe, &self.config.gp, &mut rng).ok().map(|m| m.hyperparams().clone())
    }

    fn eval(&self, a: &DMatrix<f64>, hyper: &Hyperparams) -> (f64, DMatrix<f64>) {
        mgp_log_posterior_and_gradient(a, &self.x, &self.y, self.prior_mean, self.config.prior_std, hyper)
    }

    fn converged(&self, value: f64, grad: &DMatrix<f64>) -> bool {
        grad.norm() <= self.config.map_tolerance * (1.0 + value.abs())
    }

    /// Gradient ascent at fixed hyperparameters with Barzilai-Borwein steps
    /// and backtracking. Stops when converged or when no step ascends.
    fn climb(&self, mut a: DMatrix<f64>, hyper: &Hyperparams, iterations: usize) -> Option<(DMatrix<f64>, bool)> {
        let (mut value, mut grad) = self.eval(&a, hyper);
        if !value.is_finite() {
            return None;
        }
        let mut step = 1e-2 / (1.0 + grad.norm());
        for _ in 0..iterations {
            if self.converged(value, &grad) {
                return Some((a, true));
            }
            let mut accepted = None;
            let mut trial_step = step;
            for _ in 0..60 {
                let cand = &a + &grad * trial_step;
                let (v, g) = self.eval(&cand, hyper);
                if v.is_finite() && v >= value + 1e-4 * trial_step * grad.norm_squared() {
                    accepted = Some((cand, v, g));
                    break;
                }
                trial_step *= 0.5;
            }
            let Some((cand, v, g)) = accepted else {
                return Some((a, false));
            };
            let s = &cand - &a;
            let dg = &g - &grad;
            let sy = s.dot(&dg);
            // Barzilai-Borwein for ascent: curvature along s is -s.y.
            step = if sy < 0.0 { (s.norm_squared() / -sy).min(1e6) } else { trial_step * 2.0 };
            a = cand;
            value = v;
            grad = g;
        }
        let converged = self.converged(value, &grad);
        Some((a, converged))
    }

    /// MAP search from `start`. With profiled hyperparameters, refits every
    /// few steps and finishes with a climb at the last fitted values, so the
    /// returned pair is stationary in `A`.
    fn ascend(&self, start: DMatrix<f64>, fixed: Option<&Hyperparams>) -> Option<(DMatrix<f64>, Hyperparams)> {
        if let Some(h) = fixed {
            let (a, _) = self.climb(start, h, self.config.map_iterations)?;
            return Some((a, h.clone()));
        }
        let every = match self.config.hyperparams {
            HyperparamMode::Profile { every } => every.max(1),
            HyperparamMode::Fixed => self.config.map_iterations.max(1),
        };
        let mut a = start;
        let mut hyper = self.fit_hyper(&a)?;
        let mut left = self.config.map_iterations;
        while left > 0 {
            let n = every.min(left);
            left -= n;
            let (next, converged) = self.climb(a.clone(), &hyper, n)?;
            let moved = next != a;
            a = next;
            if let Some(h) = self.fit_hyper(&a) {
                hyper = h;
            }
            if converged && !moved {
                break;
            }
        }
        let (a, _) = self.climb(a, &hyper, self.config.map_iterations)?;
        Some((a, hyper))
    }

    /// Log posterior with hyperparameters fit at `a` (or held fixed).
    fn profiled(&self, a: &DMatrix<f64>, fixed: Option<&Hyperparams>) -> Option<(f64, Hyperparams)> {
        let hyper = match fixed {
            Some(h) => h.clone(),
            None => self.fit_hyper(a)?,
        };
        let (v, _) = self.eval(a, &hyper);
        v.is_finite().then_some((v, hyper))
    }

    /// Negative Hessian of the log posterior over row-major `vec(A)`, by
    /// central differences of the analytic gradient.
    fn neg_hessian(&self, a: &DMatrix<f64>, hyper: &Hyperparams) -> DMatrix<f64> {
        let (rows, cols) = a.shape();
        let n = rows * cols;
        let h = 1e-5;
        let mut hess = DMatrix::zeros(n, n);
        for p in 0..n {
            let (i, j) = (p / cols, p % cols);
            let mut plus = a.clone();
            plus[(i, j)] += h;
            let mut minus = a.clone();
            minus[(i, j)] -= h;
            let (_, gp) = self.eval(&plus, hyper);
            let (_, gm) = self.eval(&minus, hyper);
            for q in 0..n {
                let (qi, qj) = (q / cols, q % cols);
                hess[(q, p)] = (gp[(qi, qj)] - gm[(qi, qj)]) / (2.0 * h);
            }
        }
        (&hess + hess.transpose()) * -0.5
    }

    /// Damped Newton steps at fixed hyperparameters. Nearly noise free
    /// outputs give a sharply peaked posterior where first-order ascent stalls.
    fn newton_polish(&self, mut a: DMatrix<f64>, hyper: &Hyperparams, steps: usize) -> DMatrix<f64> {
        let (rows, cols) = a.shape();
        let n = rows * cols;
        let (mut value, mut grad) = self.eval(&a, hyper);
        for _ in 0..steps {
            if !value.is_finite() || self.converged(value, &grad) {
                break;
            }
            let m = self.neg_hessian(&a, hyper);
            let g = DVector::from_iterator(n, grad.transpose().iter().copied());
            let scale = m.diagonal().amax().max(1.0);
            let mut damping = 0.0;
            let dir = loop {
                let mut md = m.clone();
                for k in 0..n {
                    md[(k, k)] += damping;
                }
                if let Some(c) = md.cholesky() {
                    break Some(c.solve(&g));
                }
                damping = if damping == 0.0 { 1e-10 * scale } else { damping * 100.0 };
                if damping > scale {
                    break None;
                }
            };
            let Some(dir) = dir else { break };
            let step = DMatrix::from_row_slice(rows, cols, dir.as_slice());
            let mut t = 1.0;
            let mut improved = false;
            for _ in 0..30 {
                let cand = &a + &step * t;
                let (v, gr) = self.eval(&cand, hyper);
                if v.is_finite() && v >= value {
                    a = cand;
                    value = v;
                    grad = gr;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                break;
            }
        }
        a
    }

    fn laplace_covariance(&self, a: &DMatrix<f64>, hyper: &Hyperparams) -> Option<DMatrix<f64>> {
        self.neg_hessian(a, hyper).cholesky().map(|c| c.inverse())
    }
}

/// Supervised embedding as the MAP transfer matrix of a marginal GP model.
pub fn mgp_embedding<R: Rng + ?Sized>(doe: &Doe, d_e: usize, config: &MgpConfig, rng: &mut R) -> Result<MgpResult> {
    let d = doe.dim();
    check_dims(d, d_e)?;
    if doe.len() < 3 {
        return Err(EgorseError::InvalidInput(format!("mgp needs at least 3 points, got {}", doe.len())));
    }
    if !(config.prior_std > 0.0) {
        return Err(EgorseError::InvalidInput("mgp prior scale must be positive".into()));
    }
    let prior_mean = match &config.prior_mean {
        Some(m) => {
            if m.shape() != (d_e, d) {
                return Err(EgorseError::DimensionMismatch {
                    expected: d_e * d,
                    got: m.len(),
                });
            }
            m.clone()
        }
        None => gaussian_matrix(d_e, d, rng),
    };

    let mut order: Vec<usize> = (0..doe.len()).collect();
    if let Some(cap) = config.max_points {
        if doe.len() > cap {
            order.sort_by(|&i, &j| doe.outputs()[i].total_cmp(&doe.outputs()[j]).then(i.cmp(&j)));
            order.truncate(cap.max(3));
            order.sort_unstable();
        }
    }
    let x = DMatrix::from_fn(order.len(), d, |i, j| doe.points()[order[i]][j]);
    let y_raw: Vec<f64> = order.iter().map(|&i| doe.outputs()[i]).collect();
    let problem = MgpProblem {
        x,
        y: DVector::from_column_slice(&y_raw),
        y_raw,
        prior_mean: &prior_mean,
        config,
        fit_seed: rng.random(),
    };

    let fixed = match config.hyperparams {
        HyperparamMode::Fixed => Some(
            problem
                .fit_hyper(&prior_mean)
                .ok_or(EgorseError::NotPositiveDefinite { nugget: config.gp.max_nugget })?,
        ),
        HyperparamMode::Profile { .. } => None,
    };

    let mut starts = vec![prior_mean.clone()];
    for _ in 1..config.n_starts.max(1) {
        starts.push(gaussian_matrix(d_e, d, rng));
    }

    let prior_eval = problem.profiled(&prior_mean, fixed.as_ref());
    let prior_log_posterior = prior_eval.as_ref().map(|p| p.0).unwrap_or(f64::NEG_INFINITY);
    let mut best: Option<(DMatrix<f64>, f64, Hyperparams)> = None;
    for start in starts {
        let Some((a, _)) = problem.ascend(start, fixed.as_ref()) else {
            continue;
        };
        let Some((v, h)) = problem.profiled(&a, fixed.as_ref()) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| v > b.1) {
            best = Some((a, v, h));
        }
    }

    let (map, log_posterior, hyper, fell_back) = match best {
        Some((a, v, h)) if v >= prior_log_posterior => {
            let a = problem.newton_polish(a, &h, config.newton_steps);
            let (v, _) = problem.eval(&a, &h);
            (a, v, h, false)
        }
        _ => {
            log::warn!("mgp ascent did not improve on the prior mean");
            let (v, h) = prior_eval.ok_or(EgorseError::NotPositiveDefinite { nugget: config.gp.max_nugget })?;
            (prior_mean.clone(), v, h, true)
        }
    };
    let (_, grad) = problem.eval(&map, &hyper);
    let posterior_covariance = if config.compute_covariance {
        problem.laplace_covariance(&map, &hyper)
    } else {
        None
    };
    let matrix = TransferMatrix::new(map.clone(), MethodTag::Mgp, 0)?;
    Ok(MgpResult {
        matrix,
        map_matrix: map,
        posterior_covariance,
        gradient_norm_at_map: grad.norm(),
        log_posterior,
        prior_log_posterior,
        hyperparams: hyper,
        fell_back_to_prior: fell_back,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_tags_round_trip() {
        for m in [MethodTag::Gaussian, MethodTag::Hash, MethodTag::Pls, MethodTag::Mgp] {
            assert_eq!(m.as_str().parse::<MethodTag>().unwrap(), m);
        }
        assert!("rembo".parse::<MethodTag>().is_err());
    }

    #[test]
    fn rejects_bad_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            gaussian_embedding(2, 2, &mut rng),
            Err(EgorseError::BadReducedDimension { d: 2, d_e: 2 })
        ));
        assert!(hash_embedding(3, 0, &mut rng).is_err());
        assert!(TransferMatrix::new(DMatrix::zeros(1, 3), MethodTag::Gaussian, 0).is_err());
    }

    #[test]
    fn hash_validation_catches_bad_columns() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, -1.0, 0.0]);
        assert!(TransferMatrix::new(m, MethodTag::Hash, 0).is_err());
    }

    #[test]
    fn text_format_header_and_errors() {
        let m = TransferMatrix::new(DMatrix::from_row_slice(1, 3, &[0.1, -2.0, 3.5]), MethodTag::Gaussian, 42).unwrap();
        let text = m.to_text();
        assert!(text.starts_with("1 3 gaussian 42\n"));
        assert_eq!(TransferMatrix::from_text(&text).unwrap(), m);
        assert!(TransferMatrix::from_text("1 3 gaussian\n1 2 3\n").is_err());
        assert!(TransferMatrix::from_text("1 3 gaussian 0\n1 2\n").is_err());
        assert!(TransferMatrix::from_text("").is_err());
    }

    #[test]
    fn pls_rejects_constant_outputs() {
        let pts: Vec<DVector<f64>> = (0..6).map(|i| DVector::from_vec(vec![i as f64 * 0.1, 0.3, -0.2])).collect();
        let doe = Doe::from_points(pts, vec![2.0; 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pls_embedding(&doe, 1, &mut rng).unwrap_err(), EgorseError::ConstantOutputs);
    }

    #[test]
    fn pls_pads_when_covariance_is_exhausted() {
        // Only the first coordinate varies, so one deflation removes everything.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<DVector<f64>> = (0..12)
            .map(|i| DVector::from_vec(vec![-1.0 + i as f64 / 6.0, 0.3, -0.2, 0.1]))
            .collect();
        let ys: Vec<f64> = pts.iter().map(|p| 2.0 * p[0]).collect();
        let doe = Doe::from_points(pts, ys).unwrap();
        let emb = pls_embedding(&doe, 3, &mut rng).unwrap();
        assert_eq!(emb.padded_rows, 2);
        assert_eq!(emb.matrix.d_e(), 3);
        assert_eq!(emb.state.directions.ncols(), 1);
    }
}
