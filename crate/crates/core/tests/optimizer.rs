use egorse::cbo::AcquisitionSettings;
use egorse::embeddings::{MethodTag, MgpConfig};
use egorse::history::{parse_history_csv, Origin};
use egorse::problems::mb;
use egorse::{best_point, run_egorse, EgorseConfig, EgorseError, History};
use nalgebra::DVector;
use proptest::prelude::*;

fn cheap(x: &DVector<f64>) -> f64 {
    x.iter().enumerate().map(|(i, v)| (v - 0.1 * (i % 3) as f64).powi(2)).sum()
}

fn fast(d: usize) -> EgorseConfig {
    EgorseConfig {
        acquisition: AcquisitionSettings {
            global_population: 8,
            global_generations: 4,
            local_refine_steps: 4,
        },
        mgp: MgpConfig {
            map_iterations: 10,
            n_starts: 1,
            newton_steps: 0,
            ..MgpConfig::default()
        },
        ..EgorseConfig::new(d)
    }
}

fn method_sets() -> Vec<Vec<MethodTag>> {
    use MethodTag::*;
    vec![vec![Gaussian], vec![Hash], vec![Pls], vec![Pls, Gaussian], vec![Mgp], vec![Mgp, Gaussian]]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn every_configuration_spends_its_exact_budget(
        d in 3usize..12,
        d_e_raw in 1usize..3,
        methods in 0usize..6,
        max_nb_it in 0usize..3,
        extra in 0usize..3,
        doe in 2usize..8,
        seed in any::<u64>(),
    ) {
        let d_e = d_e_raw.min(d - 1);
        let config = EgorseConfig {
            d_e,
            methods: method_sets()[methods].clone(),
            max_nb_it,
            budget_per_subspace: d_e + 3 + extra,
            initial_doe_size: doe,
            seed,
            ..fast(d)
        };
        let mut calls = 0;
        let h = run_egorse(|x: &DVector<f64>| { calls += 1; cheap(x) }, &config).unwrap();
        prop_assert_eq!(h.len(), doe + max_nb_it * config.methods.len() * config.budget_per_subspace);
        prop_assert_eq!(h.len(), config.total_evaluations());
        prop_assert_eq!(calls, h.len());
        prop_assert!(h.max_gp_input_dim <= d_e);
        for (i, r) in h.records().iter().enumerate() {
            prop_assert_eq!(r.evaluation_index, i);
            prop_assert!(r.full_point.iter().all(|v| v.abs() <= 1.0));
        }
        prop_assert!(h.best_trace().windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn zero_outer_iterations_is_the_initial_design() {
    let config = EgorseConfig { max_nb_it: 0, initial_doe_size: 7, ..fast(5) };
    let h = run_egorse(cheap, &config).unwrap();
    assert_eq!(h.len(), 7);
    assert!(h.records().iter().all(|r| r.origin == Origin::InitialDoe));
    let mut best = f64::INFINITY;
    for (r, b) in h.records().iter().zip(h.best_trace()) {
        best = best.min(r.f_value);
        assert_eq!(*b, best);
    }
}

#[test]
fn budget_of_800_evaluations() {
    // d = 10, two methods, 9 outer iterations of 40 evaluations, DoE of 80.
    let config = EgorseConfig {
        max_nb_it: 9,
        budget_per_subspace: 40,
        initial_doe_size: 80,
        ..EgorseConfig::new(10)
    };
    assert_eq!(config.total_evaluations(), 800);
}

#[test]
fn supervised_builders_see_points_from_other_methods() {
    let config = EgorseConfig {
        max_nb_it: 3,
        budget_per_subspace: 6,
        initial_doe_size: 6,
        ..fast(8)
    };
    let h = run_egorse(cheap, &config).unwrap();
    let sizes = &h.builder_archive_sizes;
    assert_eq!(sizes.len(), 6);
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "{sizes:?}");
    for it in 0..3 {
        // Without per-slot merging both slots of an iteration see the same snapshot.
        assert_eq!(sizes[2 * it], sizes[2 * it + 1]);
        let before = h
            .records()
            .iter()
            .filter(|r| r.outer_iteration().is_none_or(|i| i < it) && r.f_value.is_finite())
            .count();
        assert_eq!(sizes[2 * it], before);
    }
    // The PLS slot of iteration 1 learns from the Gaussian slot of iteration 0.
    let gaussian_before = h.records().iter().any(|r| {
        matches!(r.origin, Origin::Subspace { outer_iteration: 0, method: MethodTag::Gaussian, .. })
    });
    assert!(gaussian_before && sizes[2] > config.initial_doe_size + config.budget_per_subspace);

    let merged = EgorseConfig { merge_each_subspace: true, ..config.clone() };
    let h = run_egorse(cheap, &merged).unwrap();
    let sizes = &h.builder_archive_sizes;
    assert_eq!(sizes[1], sizes[0] + 6);
}

#[test]
fn runs_are_reproducible() {
    let config = EgorseConfig {
        max_nb_it: 2,
        budget_per_subspace: 6,
        initial_doe_size: 5,
        seed: 42,
        ..fast(10)
    };
    let problem = mb(10, 3).unwrap();
    let a = run_egorse(|x: &DVector<f64>| problem.evaluate(x).unwrap(), &config).unwrap();
    let b = run_egorse(|x: &DVector<f64>| problem.evaluate(x).unwrap(), &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv(), b.to_csv());
    let c = run_egorse(|x: &DVector<f64>| problem.evaluate(x).unwrap(), &EgorseConfig { seed: 43, ..config }).unwrap();
    assert_ne!(a.to_csv(), c.to_csv());
}

#[test]
fn non_finite_values_are_recorded_but_never_best() {
    let config = EgorseConfig {
        max_nb_it: 2,
        budget_per_subspace: 6,
        initial_doe_size: 6,
        ..fast(6)
    };
    let mut n = 0;
    let h = run_egorse(
        |x: &DVector<f64>| {
            n += 1;
            if n % 4 == 0 {
                f64::NAN
            } else {
                cheap(x)
            }
        },
        &config,
    )
    .unwrap();
    assert_eq!(h.len(), config.total_evaluations());
    assert!(h.records().iter().any(|r| r.f_value.is_nan()));
    assert!(h.best_trace().iter().skip(1).all(|b| b.is_finite()));
    let (_, best) = best_point(&h).unwrap();
    assert!(best.is_finite());
    let rows = parse_history_csv(&h.to_csv()).unwrap();
    assert_eq!(rows.len(), h.len());
    assert!(rows.iter().any(|r| r.f_value.is_nan()));
}

#[test]
fn failing_supervised_builder_is_substituted() {
    let config = EgorseConfig {
        methods: vec![MethodTag::Pls],
        max_nb_it: 2,
        budget_per_subspace: 5,
        initial_doe_size: 4,
        ..fast(6)
    };
    // Constant outputs leave nothing for PLS to fit.
    let h = run_egorse(|_: &DVector<f64>| 2.0, &config).unwrap();
    assert_eq!(h.len(), 14);
    assert!(h.records().iter().filter(|r| r.origin != Origin::InitialDoe).all(|r| r.builder_substituted));
}

#[test]
fn invalid_configurations_are_rejected() {
    let f = |_: &DVector<f64>| 0.0;
    assert!(matches!(
        run_egorse(f, &EgorseConfig { d_e: 5, ..fast(5) }),
        Err(EgorseError::BadReducedDimension { d: 5, d_e: 5 })
    ));
    assert!(run_egorse(f, &EgorseConfig { methods: vec![], ..fast(5) }).is_err());
    assert!(run_egorse(f, &EgorseConfig { budget_per_subspace: 4, ..fast(5) }).is_err());
    assert!(run_egorse(f, &EgorseConfig { initial_doe_size: 1, ..fast(5) }).is_err());
}

#[test]
fn best_point_is_the_earliest_minimum() {
    let mut h = History::new();
    assert!(best_point(&h).is_err());
    let p = |v: f64| DVector::from_element(2, v);
    h.push(p(0.1), 3.0, 0.0, Origin::InitialDoe, false);
    assert_eq!(best_point(&h).unwrap(), (p(0.1), 3.0));
    h.push(p(0.2), f64::NAN, 0.0, Origin::InitialDoe, false);
    h.push(p(0.3), 1.0, 0.0, Origin::InitialDoe, false);
    h.push(p(0.4), 1.0, 0.0, Origin::InitialDoe, false);
    h.push(p(0.5), 2.0, 0.0, Origin::InitialDoe, false);
    let (x, v) = best_point(&h).unwrap();
    assert_eq!((x, v), (p(0.3), 1.0));
    assert_eq!(v, *h.best_trace().last().unwrap());
    let scan = h.records().iter().map(|r| r.f_value).filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    assert_eq!(v, scan);
}
