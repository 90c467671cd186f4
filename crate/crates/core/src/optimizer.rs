//! The outer loop: cycle over embedding builders, optimize in each subspace,
//! and feed every evaluated point back into a shared archive.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cbo::{run_cbo, AcquisitionSettings, CboConfig, InnerSeeding};
use crate::doe::{latin_hypercube_unit, Doe};
use crate::embeddings::{
    gaussian_embedding, hash_embedding, mgp_embedding, pls_embedding, MethodTag, MgpConfig, TransferMatrix,
};
use crate::error::{EgorseError, Result};
use crate::gp::GpFitConfig;
use crate::history::{History, Origin};
use crate::subspace::{compute_bounds, ReducedProblem, Subspace};

#[derive(Debug, Clone, PartialEq)]
pub struct EgorseConfig {
    pub d: usize,
    pub d_e: usize,
    /// Builders used in order within every outer iteration.
    pub methods: Vec<MethodTag>,
    pub max_nb_it: usize,
    pub budget_per_subspace: usize,
    pub initial_doe_size: usize,
    pub seed: u64,
    /// Let later slots of an outer iteration see points from earlier slots.
    pub merge_each_subspace: bool,
    /// Record elapsed seconds per evaluation; zeros otherwise.
    pub record_wall_clock: bool,
    pub seeding: InnerSeeding,
    pub acquisition: AcquisitionSettings,
    pub gp: GpFitConfig,
    pub mgp: MgpConfig,
}

impl EgorseConfig {
    pub fn new(d: usize) -> Self {
        let d_e = 2;
        EgorseConfig {
            d,
            d_e,
            methods: vec![MethodTag::Pls, MethodTag::Gaussian],
            max_nb_it: 10,
            budget_per_subspace: 20 * d_e,
            initial_doe_size: d,
            seed: 0,
            merge_each_subspace: false,
            record_wall_clock: false,
            seeding: InnerSeeding::Fresh,
            acquisition: AcquisitionSettings::default(),
            gp: GpFitConfig::default(),
            mgp: MgpConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EgorseError::InvalidInput(m));
        if self.methods.is_empty() {
            return bad("methods: at least one embedding builder is required".into());
        }
        if self.d_e == 0 || self.d_e >= self.d {
            return Err(EgorseError::BadReducedDimension { d: self.d, d_e: self.d_e });
        }
        if self.budget_per_subspace < self.d_e + 3 {
            return bad(format!(
                "budget_per_subspace: {} is below d_e + 3 = {}",
                self.budget_per_subspace,
                self.d_e + 3
            ));
        }
        if self.initial_doe_size < 2 {
            return bad(format!("initial_doe_size: {} is below 2", self.initial_doe_size));
        }
        self.acquisition.validate()
    }

    /// Number of expensive evaluations a run performs.
    pub fn total_evaluations(&self) -> usize {
        self.initial_doe_size + self.max_nb_it * self.methods.len() * self.budget_per_subspace
    }

    fn cbo_config(&self) -> CboConfig {
        CboConfig {
            seeding: self.seeding,
            acquisition: self.acquisition.clone(),
            gp: self.gp.clone(),
            ..CboConfig::new(self.budget_per_subspace)
        }
    }
}

/// Runs the optimizer with the random stream seeded by `config.seed`.
pub fn run_egorse<F>(f: F, config: &EgorseConfig) -> Result<History>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    run_egorse_with_rng(f, config, &mut rng)
}

pub fn run_egorse_with_rng<F, R>(mut f: F, config: &EgorseConfig, rng: &mut R) -> Result<History>
where
    F: FnMut(&DVector<f64>) -> f64,
    R: Rng + ?Sized,
{
    config.validate()?;
    let start = Instant::now();
    let clock = |start: &Instant| {
        if config.record_wall_clock {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };

    let mut history = History::new();
    let mut archive = Doe::new(config.d)?;
    for x in latin_hypercube_unit(config.initial_doe_size, config.d, rng) {
        let y = f(&x);
        history.push(x.clone(), y, clock(&start), Origin::InitialDoe, false);
        if y.is_finite() {
            archive.merge(x, y)?;
        }
    }

    let cbo_config = config.cbo_config();
    for it in 0..config.max_nb_it {
        let snapshot = archive.clone();
        let mut pending: Vec<(DVector<f64>, f64)> = Vec::new();
        for (slot, &method) in config.methods.iter().enumerate() {
            let slot_seed: u64 = rng.random();
            let mut slot_rng = ChaCha8Rng::seed_from_u64(slot_seed);
            let view = if config.merge_each_subspace { &archive } else { &snapshot };
            history.builder_archive_sizes.push(view.len());

            let (subspace, substituted) = build_subspace(method, view, config, slot_seed, &mut slot_rng)?;
            log::debug!(
                "outer iteration {it}, slot {slot}: {method}{} subspace, bounds {:?}",
                if substituted { " (gaussian substitute)" } else { "" },
                subspace.bounds().as_slice()
            );
            let problem = ReducedProblem::new(subspace);

            let mut stamps = Vec::with_capacity(config.budget_per_subspace);
            let mut timed = |x: &DVector<f64>| {
                let y = f(x);
                stamps.push(clock(&start));
                y
            };
            let run = run_cbo(&problem, &mut timed, Some(view), &cbo_config, &mut slot_rng)?;
            history.max_gp_input_dim = history.max_gp_input_dim.max(run.max_gp_input_dim);
            if method == MethodTag::Mgp && !substituted {
                history.max_gp_input_dim = history.max_gp_input_dim.max(config.d_e);
            }
            for (e, t) in run.evaluations.into_iter().zip(stamps) {
                let origin = Origin::Subspace {
                    outer_iteration: it,
                    slot,
                    method,
                    used_map: e.used_map,
                };
                history.push(e.full_point.clone(), e.f_value, t, origin, substituted);
                if e.f_value.is_finite() {
                    pending.push((e.full_point, e.f_value));
                }
            }
            if config.merge_each_subspace {
                for (x, y) in pending.drain(..) {
                    archive.merge(x, y)?;
                }
            }
        }
        for (x, y) in pending {
            archive.merge(x, y)?;
        }
        if let Some(best) = history.best_trace().last() {
            log::info!("outer iteration {it}: {} evaluations, best {best}", history.len());
        }
    }
    Ok(history)
}

/// Builds the subspace of one slot, substituting a Gaussian matrix when a
/// supervised builder or the bound computation fails.
fn build_subspace(
    method: MethodTag,
    archive: &Doe,
    config: &EgorseConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(Subspace, bool)> {
    let (d, d_e) = (config.d, config.d_e);
    let built: Result<TransferMatrix> = match method {
        MethodTag::Gaussian => gaussian_embedding(d, d_e, rng),
        MethodTag::Hash => hash_embedding(d, d_e, rng),
        MethodTag::Pls => pls_embedding(archive, d_e, rng).map(|p| p.matrix),
        MethodTag::Mgp => {
            let mut mgp = config.mgp.clone();
            if mgp.prior_mean.is_none() {
                mgp.prior_mean = pls_embedding(archive, d_e, rng)
                    .ok()
                    .map(|p| p.matrix.entries().clone());
            }
            mgp_embedding(archive, d_e, &mgp, rng).map(|r| r.matrix)
        }
    };
    match built.and_then(|a| compute_bounds(&a.with_seed(seed))) {
        Ok(s) => Ok((s, false)),
        Err(e) => {
            log::warn!("{method} builder failed ({e}); using a gaussian matrix");
            let a = gaussian_embedding(d, d_e, rng)?.with_seed(seed);
            Ok((compute_bounds(&a)?, true))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &DVector<f64>) -> f64 {
        (x[0] - 0.3).powi(2) + (x[1] + 0.2).powi(2)
    }

    fn small(d: usize) -> EgorseConfig {
        EgorseConfig {
            max_nb_it: 1,
            budget_per_subspace: 6,
            initial_doe_size: 5,
            acquisition: AcquisitionSettings {
                global_population: 10,
                global_generations: 5,
                local_refine_steps: 5,
            },
            ..EgorseConfig::new(d)
        }
    }

    #[test]
    fn zero_iterations_is_the_doe() {
        let c = EgorseConfig { max_nb_it: 0, ..small(6) };
        let h = run_egorse(sphere, &c).unwrap();
        assert_eq!(h.len(), 5);
        assert!(h.records().iter().all(|r| r.origin == Origin::InitialDoe));
    }

    #[test]
    fn accounting_and_provenance() {
        let c = small(6);
        let h = run_egorse(sphere, &c).unwrap();
        assert_eq!(h.len(), c.total_evaluations());
        assert_eq!(h.len(), 5 + 2 * 6);
        assert!(h.max_gp_input_dim <= c.d_e);
        let slots: Vec<_> = h.records().iter().filter_map(|r| match r.origin {
            Origin::Subspace { method, .. } => Some(method),
            Origin::InitialDoe => None,
        }).collect();
        assert_eq!(&slots[..6], &[MethodTag::Pls; 6]);
        assert_eq!(&slots[6..], &[MethodTag::Gaussian; 6]);
    }

    #[test]
    fn deterministic() {
        let c = small(5);
        assert_eq!(run_egorse(sphere, &c).unwrap(), run_egorse(sphere, &c).unwrap());
    }

    #[test]
    fn constant_objective_substitutes_gaussian() {
        let c = EgorseConfig {
            methods: vec![MethodTag::Pls],
            ..small(5)
        };
        let h = run_egorse(|_: &DVector<f64>| 1.0, &c).unwrap();
        assert_eq!(h.len(), c.total_evaluations());
        assert!(h.records()[5..].iter().all(|r| r.builder_substituted));
    }

    #[test]
    fn invalid_configs() {
        assert!(EgorseConfig { methods: vec![], ..small(5) }.validate().is_err());
        assert!(EgorseConfig { budget_per_subspace: 4, ..small(5) }.validate().is_err());
        assert!(EgorseConfig { initial_doe_size: 1, ..small(5) }.validate().is_err());
        assert!(EgorseConfig { d_e: 5, ..small(5) }.validate().is_err());
    }
}
