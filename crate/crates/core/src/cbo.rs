//! Constrained Bayesian optimization inside one reduced box.
//!
//! The objective surrogate drives expected improvement; a second surrogate on
//! the membership constraint decides feasibility through its posterior mean.

use std::cmp::Ordering;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::doe::{latin_hypercube, Doe};
use crate::error::{EgorseError, Result};
use crate::gp::{fit_gp, GpFitConfig, GpModel};
use crate::subspace::{MapKind, ReducedProblem};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn norm_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected improvement below `y_min` of a normal `N(mean, std^2)`.
pub fn expected_improvement_from(mean: f64, std: f64, y_min: f64) -> f64 {
    if !(std > 0.0) {
        return 0.0;
    }
    let gap = y_min - mean;
    let z = gap / std;
    (gap * norm_cdf(z) + std * norm_pdf(z)).max(0.0)
}

fn is_degenerate_std(model: &GpModel, std: f64) -> bool {
    std < 1e-12 * model.kernel_variance().sqrt()
}

/// Expected improvement of the model at `u`; zero where the posterior std vanishes.
pub fn expected_improvement(model: &GpModel, u: &DVector<f64>, y_min: f64) -> Result<f64> {
    let p = model.predict(u)?;
    if is_degenerate_std(model, p.std) {
        return Ok(0.0);
    }
    Ok(expected_improvement_from(p.mean, p.std, y_min))
}

/// Expected improvement and its gradient with respect to `u`.
pub fn expected_improvement_gradient(model: &GpModel, u: &DVector<f64>, y_min: f64) -> Result<(f64, DVector<f64>)> {
    let (p, g) = model.predict_gradient(u)?;
    if g.degenerate || is_degenerate_std(model, p.std) {
        return Ok((0.0, DVector::zeros(u.len())));
    }
    let z = (y_min - p.mean) / p.std;
    let ei = expected_improvement_from(p.mean, p.std, y_min);
    let grad = -&g.grad_mean * norm_cdf(z) + &g.grad_std * norm_pdf(z);
    Ok((ei, grad))
}

/// Settings of the acquisition maximizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionSettings {
    pub global_population: usize,
    pub global_generations: usize,
    pub local_refine_steps: usize,
}

impl Default for AcquisitionSettings {
    fn default() -> Self {
        AcquisitionSettings {
            global_population: 30,
            global_generations: 30,
            local_refine_steps: 30,
        }
    }
}

impl AcquisitionSettings {
    pub fn validate(&self) -> Result<()> {
        if self.global_population < 4 || self.global_generations == 0 || self.local_refine_steps == 0 {
            return Err(EgorseError::InvalidInput(format!(
                "acquisition settings need population >= 4 and positive counts: {self:?}"
            )));
        }
        Ok(())
    }
}

/// A scored acquisition candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub u: DVector<f64>,
    pub ei: f64,
    pub cst_mean: f64,
    pub std: f64,
}

impl Candidate {
    pub fn is_feasible(&self) -> bool {
        self.cst_mean >= 0.0
    }
}

/// Ranking of candidates, best first: feasible before infeasible; feasible by
/// larger EI, infeasible by smaller violation; then smaller norm.
pub fn compare_candidates(a: &Candidate, b: &Candidate) -> Ordering {
    match (a.is_feasible(), b.is_feasible()) {
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (true, true) => b.ei.total_cmp(&a.ei).then(a.u.norm().total_cmp(&b.u.norm())),
        (false, false) => b
            .cst_mean
            .total_cmp(&a.cst_mean)
            .then(b.ei.total_cmp(&a.ei))
            .then(a.u.norm().total_cmp(&b.u.norm())),
    }
}

/// Index of the best candidate; ties resolved by lowest index.
pub fn best_candidate_index(cands: &[Candidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cands.iter().enumerate() {
        if best.is_none_or(|b| compare_candidates(c, &cands[b]) == Ordering::Less) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionResult {
    pub candidate: Candidate,
    /// No candidate was predicted feasible; the least violating one is returned.
    pub infeasible: bool,
    /// EI vanished everywhere sampled; the most uncertain candidate is returned.
    pub exploration_fallback: bool,
}

fn score(obj: &GpModel, cst: &GpModel, u: DVector<f64>, y_min: f64) -> Result<Candidate> {
    let p = obj.predict(&u)?;
    let ei = if is_degenerate_std(obj, p.std) {
        0.0
    } else {
        expected_improvement_from(p.mean, p.std, y_min)
    };
    let cst_mean = cst.predict(&u)?.mean;
    Ok(Candidate {
        u,
        ei,
        cst_mean,
        std: p.std,
    })
}

fn clamp_box(u: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(u.len(), |i, _| u[i].clamp(lower[i], upper[i]))
}

/// Maximizes EI subject to `cst_mean >= 0` over the box `[lower, upper]`.
///
/// Phase one is a rank-based differential evolution; phase two refines the
/// winner with projected gradient steps. The best point seen is returned.
pub fn optimize_acquisition<R: Rng + ?Sized>(
    obj_gp: &GpModel,
    cst_gp: &GpModel,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    y_min: f64,
    settings: &AcquisitionSettings,
    rng: &mut R,
) -> Result<AcquisitionResult> {
    settings.validate()?;
    let n = lower.len();
    if obj_gp.input_dim() != n || cst_gp.input_dim() != n {
        return Err(EgorseError::DimensionMismatch {
            expected: n,
            got: obj_gp.input_dim(),
        });
    }
    let np = settings.global_population;
    let init = latin_hypercube(np, lower, upper, rng);
    let mut pop: Vec<Candidate> = init
        .into_par_iter()
        .map(|u| score(obj_gp, cst_gp, u, y_min))
        .collect::<Result<_>>()?;
    let mut seen: Vec<Candidate> = pop.clone();

    let (fw, cr) = (0.7, 0.9);
    for _ in 0..settings.global_generations {
        let trials: Vec<DVector<f64>> = (0..np)
            .map(|i| {
                let mut pick = || loop {
                    let k = rng.random_range(0..np);
                    if k != i {
                        break k;
                    }
                };
                let (a, b, c) = (pick(), pick(), pick());
                let jr = rng.random_range(0..n);
                let mut t = pop[i].u.clone();
                for j in 0..n {
                    if j == jr || rng.random::<f64>() < cr {
                        t[j] = pop[a].u[j] + fw * (pop[b].u[j] - pop[c].u[j]);
                    }
                }
                clamp_box(&t, lower, upper)
            })
            .collect();
        let scored: Vec<Candidate> = trials
            .into_par_iter()
            .map(|u| score(obj_gp, cst_gp, u, y_min))
            .collect::<Result<_>>()?;
        for (i, t) in scored.into_iter().enumerate() {
            if compare_candidates(&t, &pop[i]) == Ordering::Less {
                pop[i] = t.clone();
            }
            seen.push(t);
        }
    }

    let any_feasible = seen.iter().any(|c| c.is_feasible());
    let ei_all_zero = seen.iter().filter(|c| c.is_feasible() || !any_feasible).all(|c| c.ei <= 0.0);
    if ei_all_zero {
        let pool: Vec<&Candidate> = seen.iter().filter(|c| c.is_feasible() || !any_feasible).collect();
        let mut best = pool[0];
        for c in pool.iter().skip(1) {
            if c.std > best.std {
                best = c;
            }
        }
        return Ok(AcquisitionResult {
            candidate: best.clone(),
            infeasible: !any_feasible,
            exploration_fallback: true,
        });
    }

    let mut current = pop[best_candidate_index(&pop).expect("population is not empty")].clone();
    let width = (upper - lower).amax();
    let mut step = 0.1 * width;
    for _ in 0..settings.local_refine_steps {
        // Ascend EI when feasible, otherwise climb the constraint mean.
        let grad = if current.is_feasible() {
            expected_improvement_gradient(obj_gp, &current.u, y_min)?.1
        } else {
            cst_gp.predict_gradient(&current.u)?.1.grad_mean
        };
        let gnorm = grad.norm();
        if gnorm < 1e-8 {
            break;
        }
        let dir = grad / gnorm;
        let mut improved = false;
        let mut s = step;
        for _ in 0..20 {
            let u = clamp_box(&(&current.u + &dir * s), lower, upper);
            let cand = score(obj_gp, cst_gp, u, y_min)?;
            if compare_candidates(&cand, &current) == Ordering::Less {
                current = cand;
                improved = true;
                break;
            }
            s *= 0.5;
        }
        if !improved {
            break;
        }
        step = (2.0 * s).min(0.5 * width);
    }

    Ok(AcquisitionResult {
        infeasible: !current.is_feasible(),
        candidate: current,
        exploration_fallback: false,
    })
}

/// How the first points of each inner run are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerSeeding {
    /// Latin hypercube over the reduced box.
    Fresh,
    /// Images `A x` of the best archive points (re-evaluated through the maps).
    ProjectedArchive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CboConfig {
    /// Expensive evaluations allowed in this subspace.
    pub budget: usize,
    /// Size of the seed design; `d_e + 2` when absent.
    pub initial_size: Option<usize>,
    pub seeding: InnerSeeding,
    pub acquisition: AcquisitionSettings,
    pub gp: GpFitConfig,
}

impl CboConfig {
    pub fn new(budget: usize) -> Self {
        CboConfig {
            budget,
            initial_size: None,
            seeding: InnerSeeding::Fresh,
            acquisition: AcquisitionSettings::default(),
            gp: GpFitConfig::default(),
        }
    }
}

/// One expensive evaluation made by the inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerEvaluation {
    /// Reduced point in the original (unscaled) coordinates.
    pub u: DVector<f64>,
    pub full_point: DVector<f64>,
    /// Raw objective value, possibly non-finite.
    pub f_value: f64,
    pub constraint: f64,
    pub used_map: MapKind,
    pub is_member: bool,
    /// Chosen at random because the surrogate step failed.
    pub random_fallback: bool,
    pub projection_fallback: bool,
}

/// Outcome of an inner optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceRun {
    pub budget: usize,
    pub evaluations: Vec<InnerEvaluation>,
    /// Largest input dimension of any GP trained in this run.
    pub max_gp_input_dim: usize,
    pub gp_fits: usize,
    pub infeasible_proposals: usize,
    pub exploration_fallbacks: usize,
}

impl SubspaceRun {
    pub fn evaluations_used(&self) -> usize {
        self.evaluations.len()
    }

    /// Running minimum of the objective, non-finite values counted as +inf.
    pub fn best_trace(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.evaluations
            .iter()
            .map(|e| {
                if e.f_value.is_finite() && e.f_value < best {
                    best = e.f_value;
                }
                best
            })
            .collect()
    }
}

struct InnerState<'a, F> {
    problem: &'a ReducedProblem,
    f: F,
    scales: DVector<f64>,
    obj_doe: Doe,
    cst_doe: Doe,
    run: SubspaceRun,
}

impl<F: FnMut(&DVector<f64>) -> f64> InnerState<'_, F> {
    /// Evaluates at scaled point `v` in `[-1,1]^d_e`; always spends one evaluation.
    fn evaluate(&mut self, v: DVector<f64>, random_fallback: bool) -> Result<()> {
        let u = v.component_mul(&self.scales);
        let pre = self.problem.preimage(&u)?;
        let f_value = (self.f)(&pre.full_point);
        let model_value = if f_value.is_finite() {
            f_value
        } else {
            log::warn!("non-finite objective value {f_value}; using the worst finite value for the surrogate");
            let worst = self.obj_doe.outputs().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if worst.is_finite() {
                worst
            } else {
                0.0
            }
        };
        // Duplicates stay in the record but not in the surrogate data.
        let _ = self.obj_doe.merge(v.clone(), model_value)?;
        let _ = self.cst_doe.merge(v, pre.constraint)?;
        self.run.evaluations.push(InnerEvaluation {
            u,
            full_point: pre.full_point,
            f_value,
            constraint: pre.constraint,
            used_map: pre.used_map,
            is_member: pre.is_member,
            random_fallback,
            projection_fallback: pre.fallback,
        });
        Ok(())
    }

    fn fit(&mut self, config: &GpFitConfig, rng: &mut ChaCha8Rng) -> Option<(GpModel, GpModel)> {
        let try_fit = |doe: &Doe, rng: &mut ChaCha8Rng| {
            fit_gp(doe, config, rng).or_else(|e| {
                log::debug!("gp fit failed ({e}); retrying with a larger nugget");
                fit_gp(doe, &config.with_escalated_nugget(1e3), rng)
            })
        };
        let obj = try_fit(&self.obj_doe, rng).ok()?;
        let cst = try_fit(&self.cst_doe, rng).ok()?;
        self.run.gp_fits += 2;
        self.run.max_gp_input_dim = self.run.max_gp_input_dim.max(obj.input_dim()).max(cst.input_dim());
        Some((obj, cst))
    }
}

/// Runs constrained BO in the reduced box of `problem`, spending exactly
/// `config.budget` evaluations of `f` on full-space points.
///
/// `archive` is only read when seeding from projected archive points.
pub fn run_cbo<F, R>(
    problem: &ReducedProblem,
    f: F,
    archive: Option<&Doe>,
    config: &CboConfig,
    rng: &mut R,
) -> Result<SubspaceRun>
where
    F: FnMut(&DVector<f64>) -> f64,
    R: Rng + ?Sized,
{
    let sub = problem.subspace();
    let d_e = sub.d_e();
    let n0 = config.initial_size.unwrap_or(d_e + 2);
    if n0 < 2 || config.budget < n0 {
        return Err(EgorseError::InvalidInput(format!(
            "inner budget {} must cover a seed design of {} (>= 2) points",
            config.budget, n0
        )));
    }
    config.acquisition.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng.random());
    let lower = DVector::from_element(d_e, -1.0);
    let upper = DVector::from_element(d_e, 1.0);

    let mut state = InnerState {
        problem,
        f,
        scales: sub.bounds().clone(),
        obj_doe: Doe::new(d_e)?,
        cst_doe: Doe::new(d_e)?,
        run: SubspaceRun {
            budget: config.budget,
            evaluations: Vec::with_capacity(config.budget),
            max_gp_input_dim: 0,
            gp_fits: 0,
            infeasible_proposals: 0,
            exploration_fallbacks: 0,
        },
    };

    let mut seeds = Vec::with_capacity(n0);
    if let (InnerSeeding::ProjectedArchive, Some(archive)) = (config.seeding, archive) {
        let mut order: Vec<usize> = (0..archive.len()).collect();
        order.sort_by(|&i, &j| archive.outputs()[i].total_cmp(&archive.outputs()[j]).then(i.cmp(&j)));
        for &i in order.iter().take(n0) {
            let u = sub.clip(&sub.transfer().apply(&archive.points()[i]));
            seeds.push(sub.scaled(&u));
        }
    }
    if seeds.len() < n0 {
        seeds.extend(latin_hypercube(n0 - seeds.len(), &lower, &upper, &mut rng));
    }
    for v in seeds {
        state.evaluate(v, false)?;
    }

    while state.run.evaluations.len() < config.budget {
        let mut proposal = None;
        if let Some((obj, cst)) = state.fit(&config.gp, &mut rng) {
            let y_min = state.obj_doe.min_output().expect("seeded doe is not empty");
            match optimize_acquisition(&obj, &cst, &lower, &upper, y_min, &config.acquisition, &mut rng) {
                Ok(res) => {
                    if res.infeasible {
                        state.run.infeasible_proposals += 1;
                    }
                    if res.exploration_fallback {
                        state.run.exploration_fallbacks += 1;
                    }
                    let v = res.candidate.u;
                    let dup = state.obj_doe.nearest(&v).is_some_and(|(_, dist)| dist <= 1e-12);
                    if !dup {
                        proposal = Some(v);
                    }
                }
                Err(e) => log::debug!("acquisition failed: {e}"),
            }
        }
        match proposal {
            Some(v) => state.evaluate(v, false)?,
            None => {
                let v = DVector::from_fn(d_e, |_, _| rng.random_range(-1.0..1.0));
                state.evaluate(v, true)?;
            }
        }
    }
    Ok(state.run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn ei_edge_values() {
        assert_eq!(expected_improvement_from(0.0, 0.0, 1.0), 0.0);
        let s = 0.7;
        assert!((expected_improvement_from(2.0, s, 2.0) - s * INV_SQRT_2PI).abs() < 1e-15);
        // Far below the incumbent EI tends to the gap.
        assert!((expected_improvement_from(-10.0, 1e-3, 0.0) - 10.0).abs() < 1e-9);
        assert!(expected_improvement_from(10.0, 0.1, 0.0) >= 0.0);
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((norm_pdf(0.0) - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-16);
    }

    fn cand(u: f64, ei: f64, cst: f64) -> Candidate {
        Candidate {
            u: DVector::from_vec(vec![u]),
            ei,
            cst_mean: cst,
            std: 1.0,
        }
    }

    #[test]
    fn feasibility_outranks_ei() {
        let feasible_small = cand(0.5, 1e-9, 0.0);
        let infeasible_big = cand(0.1, 1e9, -1e-9);
        assert_eq!(compare_candidates(&feasible_small, &infeasible_big), Ordering::Less);
        let less_violation = cand(0.3, 0.0, -0.1);
        let more_violation = cand(0.0, 5.0, -0.2);
        assert_eq!(compare_candidates(&less_violation, &more_violation), Ordering::Less);
        let near = cand(0.1, 1.0, 1.0);
        let far = cand(0.9, 1.0, 1.0);
        assert_eq!(compare_candidates(&near, &far), Ordering::Less);
        let cands = vec![far.clone(), near.clone(), near.clone()];
        assert_eq!(best_candidate_index(&cands), Some(1));
    }

    #[test]
    fn bad_settings_rejected() {
        let s = AcquisitionSettings {
            global_population: 2,
            ..AcquisitionSettings::default()
        };
        assert!(s.validate().is_err());
    }
}
