use egorse::doe::{latin_hypercube_unit, Doe};
use egorse::gp::{fit_gp, gp_with_lengthscales, log_marginal_likelihood, GpFitConfig, GpModel, Hyperparams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn kernel(h: &Hyperparams, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let s: f64 = (0..a.len()).map(|k| ((a[k] - b[k]) / h.lengthscales[k]).powi(2)).sum();
    h.variance * (-0.5 * s).exp()
}

fn dense_covariance(h: &Hyperparams, doe: &Doe) -> DMatrix<f64> {
    let p = doe.points();
    DMatrix::from_fn(p.len(), p.len(), |i, j| {
        kernel(h, &p[i], &p[j]) + if i == j { h.nugget } else { 0.0 }
    })
}

fn dense_lml(h: &Hyperparams, doe: &Doe) -> f64 {
    let k = dense_covariance(h, doe);
    let kinv = k.clone().try_inverse().unwrap();
    let r = doe.y_vector().add_scalar(-h.mean);
    let n = r.len() as f64;
    -0.5 * (r.transpose() * kinv * &r)[0] - 0.5 * k.determinant().ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

fn dense_predict(model: &GpModel, u: &DVector<f64>) -> (f64, f64) {
    let h = model.hyperparams();
    let doe = model.training_doe();
    let kinv = dense_covariance(h, doe).try_inverse().unwrap();
    let kx = DVector::from_iterator(doe.len(), doe.points().iter().map(|p| kernel(h, u, p)));
    let r = doe.y_vector().add_scalar(-h.mean);
    let mean = h.mean + (kx.transpose() * &kinv * r)[0];
    let var = h.variance - (kx.transpose() * kinv * &kx)[0];
    (mean, var.max(0.0).sqrt())
}

fn random_doe(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Doe {
    let pts = latin_hypercube_unit(n, dim, rng);
    let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ys = pts
        .iter()
        .map(|p| (0..dim).map(|k| (w[k] * p[k] + 0.3 * k as f64).sin()).sum::<f64>() + 0.5 * p.norm_squared())
        .collect();
    Doe::from_points(pts, ys).unwrap()
}

#[test]
fn loo_error_on_sine() {
    let xs: Vec<f64> = (0..12).map(|i| -1.0 + 2.0 * i as f64 / 11.0).collect();
    let mut errs = Vec::new();
    for leave in 0..xs.len() {
        let train: Vec<f64> = xs.iter().enumerate().filter(|(i, _)| *i != leave).map(|(_, x)| *x).collect();
        let doe = Doe::from_points(
            train.iter().map(|x| DVector::from_vec(vec![*x])).collect(),
            train.iter().map(|x| (6.0 * x).sin()).collect(),
        )
        .unwrap();
        let gp = fit_gp(&doe, &GpFitConfig::default(), &mut ChaCha8Rng::seed_from_u64(leave as u64)).unwrap();
        let p = gp.predict(&DVector::from_vec(vec![xs[leave]])).unwrap();
        errs.push((p.mean - (6.0 * xs[leave]).sin()).abs());
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!(mean < 0.05, "mean LOO error {mean}, errors {errs:?}");
}

#[test]
fn fitted_likelihood_dominates_truth() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let xs: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let truth = Hyperparams {
            lengthscales: vec![0.4],
            variance: 1.0,
            nugget: 1e-8,
            mean: 0.0,
        };
        let pts: Vec<DVector<f64>> = xs.iter().map(|x| DVector::from_vec(vec![*x])).collect();
        let tmp = Doe::from_points(pts.clone(), vec![0.0; 10]).unwrap();
        let l = dense_covariance(&truth, &tmp).cholesky().unwrap().l();
        let z = DVector::from_fn(10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = l * z;
        let doe = Doe::from_points(pts, y.iter().copied().collect()).unwrap();
        let gp = fit_gp(&doe, &GpFitConfig::default(), &mut rng).unwrap();
        let at_truth = log_marginal_likelihood(&truth, &doe);
        assert!(
            gp.log_likelihood() >= at_truth - 1e-6,
            "seed {seed}: fitted {} < truth {at_truth}",
            gp.log_likelihood()
        );
        // The reported likelihood is the one of the returned hyperparameters.
        assert!((log_marginal_likelihood(gp.hyperparams(), &doe) - gp.log_likelihood()).abs() < 1e-8);
    }
}

#[test]
fn fit_never_returns_worse_than_first_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let doe = random_doe(12, 3, &mut rng);
        let gp = fit_gp(&doe, &GpFitConfig::default(), &mut rng).unwrap();
        let x = doe.x_matrix();
        let start: Vec<f64> = (0..3)
            .map(|k| 0.5 * (x.column(k).max() - x.column(k).min()))
            .collect();
        let first = gp_with_lengthscales(&doe, &start, &GpFitConfig::default()).unwrap();
        assert!(gp.log_likelihood() >= first.log_likelihood() - 1e-12);
    }
}

#[test]
fn likelihood_matches_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let dim = rng.random_range(1..4);
        let doe = random_doe(rng.random_range(2..15), dim, &mut rng);
        let h = Hyperparams {
            lengthscales: (0..dim).map(|_| rng.random_range(0.2..2.0)).collect(),
            variance: rng.random_range(0.5..3.0),
            nugget: 1e-6,
            mean: rng.random_range(-1.0..1.0),
        };
        let a = log_marginal_likelihood(&h, &doe);
        let b = dense_lml(&h, &doe);
        assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn three_point_prediction_matches_dense_solve() {
    let doe = Doe::from_points(
        vec![-0.7, 0.1, 0.8].into_iter().map(|x| DVector::from_vec(vec![x])).collect(),
        vec![1.0, -0.5, 2.0],
    )
    .unwrap();
    let gp = gp_with_lengthscales(&doe, &[0.45], &GpFitConfig::default()).unwrap();
    for u in [-1.0, -0.7, -0.2, 0.0, 0.33, 0.8, 1.5] {
        let u = DVector::from_vec(vec![u]);
        let p = gp.predict(&u).unwrap();
        let (m, s) = dense_predict(&gp, &u);
        assert!((p.mean - m).abs() < 1e-10, "mean {} vs {m}", p.mean);
        assert!((p.std - s).abs() < 1e-10 * gp.kernel_variance().sqrt().max(1.0) || (p.std - s).abs() < 1e-7 && s < 1e-4);
    }
}

fn central(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

// Central differences at h = 1e-5, Richardson-extrapolated with h / 2 so
// the oracle stays accurate where the posterior std bends sharply.
fn fd(f: impl Fn(f64) -> f64) -> f64 {
    let h = 1e-5;
    (4.0 * central(&f, h / 2.0) - central(&f, h)) / 3.0
}

fn fd_check(gp: &GpModel, u: &DVector<f64>) {
    let (p, g) = gp.predict_gradient(u).unwrap();
    let n = u.len();
    let mut fd_mean = DVector::zeros(n);
    let mut fd_std = DVector::zeros(n);
    for k in 0..n {
        let at = |t: f64| {
            let mut v = u.clone();
            v[k] += t;
            gp.predict(&v).unwrap()
        };
        fd_mean[k] = fd(|t| at(t).mean);
        fd_std[k] = fd(|t| at(t).std);
    }
    let rel = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm() / b.norm().max(1e-6);
    assert!(rel(&g.grad_mean, &fd_mean) < 1e-4, "mean gradient {} vs {}", g.grad_mean, fd_mean);
    if !g.degenerate && p.std > 1e-3 * gp.kernel_variance().sqrt() {
        assert!(rel(&g.grad_std, &fd_std) < 1e-4, "std gradient {} vs {} at std {}", g.grad_std, fd_std, p.std);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let dim = rng.random_range(1..4);
        let doe = random_doe(5, dim, &mut rng);
        let gp = fit_gp(&doe, &GpFitConfig::default(), &mut rng).unwrap();
        for _ in 0..100 {
            let u = DVector::from_fn(dim, |_, _| rng.random_range(-1.2..1.2));
            fd_check(&gp, &u);
        }
    }
}

#[test]
fn interpolation_and_nonnegative_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..5 {
        let dim = rng.random_range(1..5);
        let doe = random_doe(rng.random_range(4..20), dim, &mut rng);
        let gp = fit_gp(&doe, &GpFitConfig::default(), &mut rng).unwrap();
        let tol = 10.0 * gp.nugget().sqrt();
        for (x, y) in doe.points().iter().zip(doe.outputs()) {
            let p = gp.predict(x).unwrap();
            assert!((p.mean - y).abs() <= tol, "|{} - {y}| > {tol}", p.mean);
            assert!(p.std <= tol);
        }
        for _ in 0..2000 {
            let u = DVector::from_fn(dim, |_, _| rng.random_range(-1.5..1.5));
            let p = gp.predict(&u).unwrap();
            assert!(p.std >= 0.0 && p.std.is_finite());
        }
    }
}

#[test]
fn cholesky_factor_is_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let doe = random_doe(15, 2, &mut rng);
    let gp = fit_gp(&doe, &GpFitConfig::default(), &mut rng).unwrap();
    let l = gp.chol_factor();
    assert!(l.diagonal().iter().all(|v| *v > 0.0));
    assert!(l.upper_triangle().iter().enumerate().all(|(i, v)| i % 16 == 0 || *v == 0.0));
    let k = dense_covariance(gp.hyperparams(), &doe);
    assert!((l * l.transpose() - &k).amax() < 1e-10 * k.amax());
    let alpha = k.lu().solve(&doe.y_vector().add_scalar(-gp.prior_mean())).unwrap();
    assert!((gp.alpha() - &alpha).amax() < 1e-6 * alpha.amax().max(1.0));
}

#[test]
fn fit_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let doe = random_doe(10, 3, &mut rng);
    let a = fit_gp(&doe, &GpFitConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = fit_gp(&doe, &GpFitConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a.hyperparams(), b.hyperparams());
    assert_eq!(a.chol_factor(), b.chol_factor());
    assert_eq!(a.alpha(), b.alpha());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn std_is_nonnegative_and_far_field_reverts(
        seed in 0u64..10_000,
        n in 2usize..8,
        q in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doe = random_doe(n, 2, &mut rng);
        let ls = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
        let gp = gp_with_lengthscales(&doe, &ls, &GpFitConfig::default()).unwrap();
        let p = gp.predict(&DVector::from_vec(q)).unwrap();
        prop_assert!(p.std >= 0.0);
        let far = DVector::from_vec(vec![100.0, -100.0]);
        let p = gp.predict(&far).unwrap();
        prop_assert!((p.mean - gp.prior_mean()).abs() < 1e-6);
        prop_assert!((p.std - gp.kernel_variance().sqrt()).abs() < 1e-6);
    }
}
