//! Geometry of a reduced search space.
//!
//! For a transfer matrix `A` (d_e x d) this module provides the bounding box
//! `B` of `{A x : x in [-1,1]^d}`, a numeric membership test for that image,
//! the two backward maps from reduced points to full-space points and the
//! reduced objective and constraint built on them.

use std::collections::HashMap;
use std::fmt;
use std::sync::RwLock;

use nalgebra::{DMatrix, DVector};

use crate::embeddings::TransferMatrix;
use crate::error::{EgorseError, Result};

/// Default iteration cap for the Dykstra projection.
pub const DYKSTRA_MAX_ITERATIONS: usize = 10_000;
const MEMBERSHIP_MAX_ITERATIONS: usize = 200_000;

/// Transfer matrix with its pseudo-inverse and bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    transfer: TransferMatrix,
    pseudo_inverse: DMatrix<f64>,
    bounds: DVector<f64>,
    lipschitz: f64,
}

/// Outcome of a membership test.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipResult {
    pub is_member: bool,
    /// A box point mapping within `tol` of `u`, present iff `is_member`.
    pub certificate: Option<DVector<f64>>,
    /// Smallest `|A x - u|` found over the box.
    pub residual: f64,
    /// False when the iteration cap was hit before a decision was certified.
    pub converged: bool,
}

/// Which backward map produced a full-space point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MapKind {
    B,
    W,
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapKind::B => "B",
            MapKind::W => "W",
        })
    }
}

/// Smallest axis-aligned box containing the image of `[-1,1]^d`, plus the pseudo-inverse.
pub fn compute_bounds(transfer: &TransferMatrix) -> Result<Subspace> {
    let a = transfer.entries();
    let gram = a * a.transpose();
    let bounds = DVector::from_iterator(a.nrows(), a.row_iter().map(|r| r.iter().map(|v| v.abs()).sum()));
    let eig = gram.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.max();
    let (imin, min_eig) = eig.eigenvalues.argmin();
    if min_eig <= 1e-12 * max_eig {
        let combo: Vec<String> = eig
            .eigenvectors
            .column(imin)
            .iter()
            .enumerate()
            .filter(|(_, c)| c.abs() > 1e-8)
            .map(|(i, c)| format!("{c:+.3}*row{i}"))
            .collect();
        return Err(EgorseError::RankDeficient(format!(
            "rows are linearly dependent: {} = 0",
            combo.join(" ")
        )));
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| EgorseError::RankDeficient("A A^T is not positive definite".into()))?;
    let pseudo_inverse = a.transpose() * chol.inverse();
    Ok(Subspace {
        transfer: transfer.clone(),
        pseudo_inverse,
        bounds,
        lipschitz: max_eig,
    })
}

fn clamp_unit(x: &DVector<f64>) -> DVector<f64> {
    x.map(|v| v.clamp(-1.0, 1.0))
}

fn box_violation(x: &DVector<f64>) -> f64 {
    x.iter().map(|v| (v.abs() - 1.0).max(0.0)).fold(0.0, f64::max)
}

impl Subspace {
    pub fn transfer(&self) -> &TransferMatrix {
        &self.transfer
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        self.transfer.entries()
    }

    pub fn pseudo_inverse(&self) -> &DMatrix<f64> {
        &self.pseudo_inverse
    }

    /// Half-widths `b_i` of the bounding box `[-b_i, b_i]`.
    pub fn bounds(&self) -> &DVector<f64> {
        &self.bounds
    }

    pub fn d(&self) -> usize {
        self.transfer.d()
    }

    pub fn d_e(&self) -> usize {
        self.transfer.d_e()
    }

    pub fn default_tolerance(&self) -> f64 {
        1e-6 * (self.d_e() as f64).sqrt()
    }

    pub fn contains_in_box(&self, u: &DVector<f64>) -> bool {
        u.iter().zip(self.bounds.iter()).all(|(v, b)| v.abs() <= *b)
    }

    /// Componentwise clip of `u` into the bounding box.
    pub fn clip(&self, u: &DVector<f64>) -> DVector<f64> {
        u.zip_map(&self.bounds, |v, b| v.clamp(-b, b))
    }

    /// `u` scaled by the box half-widths, in `[-1,1]^d_e` for `u` in the box.
    pub fn scaled(&self, u: &DVector<f64>) -> DVector<f64> {
        u.component_div(&self.bounds)
    }

    fn project_affine(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let r = self.matrix() * x - u;
        x - &self.pseudo_inverse * r
    }

    /// Box-constrained least squares `min |A x - u|` over `[-1,1]^d`.
    pub fn membership(&self, u: &DVector<f64>, tol: Option<f64>) -> Result<MembershipResult> {
        self.check_reduced(u)?;
        let tol = tol.unwrap_or_else(|| self.default_tolerance());
        let a = self.matrix();
        let step = 1.0 / self.lipschitz;
        let mut x = clamp_unit(&(&self.pseudo_inverse * u));
        let mut r = a * &x - u;
        let mut best = (r.norm(), x.clone());
        let mut y = x.clone();
        let mut t = 1.0f64;
        let mut converged = false;
        for _ in 0..MEMBERSHIP_MAX_ITERATIONS {
            let rn = r.norm();
            if rn < best.0 {
                best = (rn, x.clone());
            }
            if best.0 <= tol {
                converged = true;
                break;
            }
            // Dual bound: min over the box of |A x - u|^2 / 2 is at least
            // max_c>=0 [-c (|A^T r|_1 + r.u) - c^2 |r|^2 / 2].
            let gap = -(a.tr_mul(&r)).lp_norm(1) - r.dot(u);
            if gap > 0.0 && gap / rn > tol {
                converged = true;
                break;
            }
            let ry = a * &y - u;
            let x_next = clamp_unit(&(&y - a.tr_mul(&ry) * step));
            let r_next = a * &x_next - u;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            if r_next.norm() > rn {
                // Adaptive restart of the momentum.
                y = x.clone();
                t = 1.0;
                continue;
            }
            y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
            t = t_next;
            x = x_next;
            r = r_next;
        }
        let (residual, x_best) = best;
        let is_member = residual <= tol;
        Ok(MembershipResult {
            is_member,
            certificate: is_member.then_some(x_best),
            residual,
            converged,
        })
    }

    fn check_reduced(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.d_e() {
            return Err(EgorseError::DimensionMismatch {
                expected: self.d_e(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// Projection of `[A]^+ u` onto `{A x = u} ∩ [-1,1]^d`, after checking membership.
    pub fn gamma_b(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.membership(u, None)?;
        if !m.is_member {
            return Err(EgorseError::NotMember {
                residual: m.residual,
                tol: self.default_tolerance(),
            });
        }
        self.project_member(u, &m).map(|(x, _)| x)
    }

    /// Dykstra projection of a certified member, falling back to the dual
    /// solve and then to the certificate. The flag reports a fallback. Fails
    /// with the Dykstra error only when no fallback yields a point.
    fn project_member(&self, u: &DVector<f64>, m: &MembershipResult) -> Result<(DVector<f64>, bool)> {
        match self.gamma_b_unchecked(u, DYKSTRA_MAX_ITERATIONS) {
            Ok(x) => Ok((x, false)),
            Err(e) => {
                log::debug!("dykstra failed on a member point ({e}); solving the dual");
                match self.gamma_b_dual(u) {
                    Ok(x) => Ok((x, true)),
                    Err(_) => m.certificate.clone().map(|x| (x, true)).ok_or(e),
                }
            }
        }
    }

    /// Dykstra's alternating projections between the box and the affine slice.
    pub fn gamma_b_unchecked(&self, u: &DVector<f64>, max_iterations: usize) -> Result<DVector<f64>> {
        self.check_reduced(u)?;
        let start = &self.pseudo_inverse * u;
        if box_violation(&start) == 0.0 {
            return Ok(start);
        }
        let d = self.d();
        let mut x = start;
        let mut p = DVector::zeros(d);
        let mut q = DVector::zeros(d);
        let mut last_residuals = vec![f64::INFINITY, f64::INFINITY];
        for _ in 0..max_iterations {
            let y = clamp_unit(&(&x + &p));
            p = &x + &p - &y;
            let x_next = self.project_affine(&(&y + &q), u);
            q = &y + &q - &x_next;
            let moved = (&x_next - &x).norm();
            let affine_res = (self.matrix() * &y - u).norm();
            let box_res = box_violation(&x_next);
            x = x_next;
            last_residuals = vec![affine_res, box_res];
            if moved < 1e-10 && affine_res < 1e-8 && box_res < 1e-8 {
                return Ok(self.polish(x, u));
            }
        }
        Err(EgorseError::NoConvergence {
            solver: "dykstra",
            iterations: max_iterations,
            residuals: last_residuals,
        })
    }

    /// Same projection as [`Subspace::gamma_b_unchecked`], solved through its
    /// `d_e`-dimensional dual: `x(l) = clamp([A]^+ u + A^T l)` with
    /// semismooth Newton steps on `A x(l) = u`.
    pub fn gamma_b_dual(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_reduced(u)?;
        let a = self.matrix();
        let z = &self.pseudo_inverse * u;
        let primal = |lambda: &DVector<f64>| clamp_unit(&(&z + a.tr_mul(lambda)));
        let dual_value = |lambda: &DVector<f64>, x: &DVector<f64>| {
            0.5 * (x - &z).norm_squared() - lambda.dot(&(a * x - u))
        };
        let scale = 1.0 + u.norm();
        let mut lambda = DVector::zeros(self.d_e());
        let mut x = primal(&lambda);
        let mut value = dual_value(&lambda, &x);
        for _ in 0..500 {
            let r = u - a * &x;
            if r.norm() <= 1e-12 * scale {
                return Ok(self.polish(x, u));
            }
            let free: Vec<usize> = (0..x.len())
                .filter(|&j| (z[j] + a.column(j).dot(&lambda)).abs() < 1.0)
                .collect();
            let mut h = DMatrix::<f64>::zeros(self.d_e(), self.d_e());
            if !free.is_empty() {
                let a_free = a.select_columns(free.iter());
                h = &a_free * a_free.transpose();
            }
            let reg = 1e-12 * (1.0 + h.trace());
            for i in 0..self.d_e() {
                h[(i, i)] += reg;
            }
            let dir = h
                .cholesky()
                .map(|c| c.solve(&r))
                .unwrap_or_else(|| r.clone() / self.lipschitz);
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let cand = &lambda + &dir * t;
                let xc = primal(&cand);
                let vc = dual_value(&cand, &xc);
                if vc >= value - 1e-14 * value.abs().max(1.0) && (u - a * &xc).norm() < r.norm() {
                    lambda = cand;
                    x = xc;
                    value = vc;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        let res = (u - a * &x).norm();
        Err(EgorseError::NoConvergence {
            solver: "dual newton",
            iterations: 500,
            residuals: vec![res, 0.0],
        })
    }

    /// Clamps into the box and removes the remaining affine residual using the
    /// coordinates that are not at a bound.
    fn polish(&self, mut x: DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let a = self.matrix();
        for _ in 0..3 {
            x = clamp_unit(&x);
            let r = u - a * &x;
            if r.norm() <= 1e-13 * (1.0 + u.norm()) {
                break;
            }
            let free: Vec<usize> = (0..x.len()).filter(|&j| x[j].abs() < 1.0 - 1e-9).collect();
            if free.len() < self.d_e() {
                break;
            }
            let a_free = a.select_columns(free.iter());
            let Some(chol) = (&a_free * a_free.transpose()).cholesky() else {
                break;
            };
            let delta = a_free.transpose() * chol.solve(&r);
            for (k, &j) in free.iter().enumerate() {
                x[j] += delta[k];
            }
        }
        clamp_unit(&x)
    }

    /// Box projection of the pseudo-inverse image; defined on the whole box `B`.
    pub fn gamma_w(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_reduced(u)?;
        Ok(clamp_unit(&(&self.pseudo_inverse * u)))
    }

    /// Constraint value: `1 - |gamma_b(u)|^2 / d` for members, `-|u / b|^2` otherwise.
    pub fn reduced_constraint(&self, u: &DVector<f64>) -> Result<f64> {
        let m = self.membership(u, None)?;
        if m.is_member {
            let (x, _) = self.project_member(u, &m)?;
            Ok(member_constraint(&x))
        } else {
            Ok(-self.scaled(u).norm_squared())
        }
    }

    /// Reduced objective: `f` at `gamma_b(u)` for members, at `gamma_w(u)` otherwise.
    /// Calls `f` exactly once.
    pub fn reduced_objective<F>(&self, f: F, u: &DVector<f64>) -> Result<ReducedObjective>
    where
        F: FnOnce(&DVector<f64>) -> f64,
    {
        let m = self.membership(u, None)?;
        let (full_point, used_map) = if m.is_member {
            (self.project_member(u, &m)?.0, MapKind::B)
        } else {
            (self.gamma_w(u)?, MapKind::W)
        };
        let value = f(&full_point);
        Ok(ReducedObjective {
            value,
            full_point,
            used_map,
        })
    }
}

fn member_constraint(x: &DVector<f64>) -> f64 {
    1.0 - x.norm_squared() / x.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedObjective {
    /// Raw value of `f`, possibly non-finite.
    pub value: f64,
    pub full_point: DVector<f64>,
    pub used_map: MapKind,
}

/// Backward-map result for one reduced point, shared by objective and constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Preimage {
    pub full_point: DVector<f64>,
    pub used_map: MapKind,
    pub constraint: f64,
    pub is_member: bool,
    /// Dykstra hit its cap on a member; the dual solve (or, failing that, the
    /// membership certificate) was used instead.
    pub fallback: bool,
}

/// Subspace with a memo of backward-map solves, so that the reduced objective
/// and constraint at a point cost one projection.
#[derive(Debug)]
pub struct ReducedProblem {
    subspace: Subspace,
    cache: RwLock<HashMap<Vec<u64>, Preimage>>,
}

impl ReducedProblem {
    pub fn new(subspace: Subspace) -> Self {
        ReducedProblem {
            subspace,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn subspace(&self) -> &Subspace {
        &self.subspace
    }

    pub fn cached_points(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }

    pub fn preimage(&self, u: &DVector<f64>) -> Result<Preimage> {
        let key: Vec<u64> = u.iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = self.cache.read().ok().and_then(|c| c.get(&key).cloned()) {
            return Ok(hit);
        }
        let sub = &self.subspace;
        let m = sub.membership(u, None)?;
        let pre = if m.is_member {
            let (x, fallback) = sub.project_member(u, &m)?;
            Preimage {
                constraint: member_constraint(&x),
                full_point: x,
                used_map: MapKind::B,
                is_member: true,
                fallback,
            }
        } else {
            Preimage {
                full_point: sub.gamma_w(u)?,
                used_map: MapKind::W,
                constraint: -sub.scaled(u).norm_squared(),
                is_member: false,
                fallback: false,
            }
        };
        if let Ok(mut c) = self.cache.write() {
            c.insert(key, pre.clone());
        }
        Ok(pre)
    }
}
