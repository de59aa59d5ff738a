use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use softimit_core::stationary::{
    bc_loss, bc_loss_grad, fit_bc, sample_feature_map, Activation, ContinuousDemoSet, FitConfig, GaussianHead,
    HetStatPolicy,
};

const ACTIVATIONS: [Activation; 3] = [Activation::Sinusoid, Activation::Triangular, Activation::PeriodicRelu];

fn prior_policy(n_features: usize, lengthscale: f64, activation: Activation, seed: u64) -> HetStatPolicy {
    let map = sample_feature_map(1, n_features, lengthscale, activation, seed).unwrap();
    HetStatPolicy::prior(map, 1, 2.0 / PI, 1e-4).unwrap()
}

fn at(x: f64) -> Array1<f64> {
    array![x]
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn sinusoid_features_approximate_the_squared_exponential_kernel() {
    let map = sample_feature_map(1, 2048, 1.0, Activation::Sinusoid, 0).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..=600 {
        let r = -3.0 + 6.0 * k as f64 / 600.0;
        let c = map.covariance(at(0.0).view(), at(r).view()).unwrap();
        worst = worst.max((c - (-0.5 * r * r).exp()).abs());
    }
    assert!(worst < 0.05, "sup error {worst}");
}

#[test]
fn covariance_depends_only_on_the_shift() {
    for activation in ACTIVATIONS {
        let map = sample_feature_map(1, 2048, 1.0, activation, 4).unwrap();
        for &r in &[0.0, 0.3, 1.0, 2.5] {
            let values: Vec<f64> = (0..=50)
                .map(|k| {
                    let x = -5.0 + 0.2 * k as f64;
                    map.covariance(at(x).view(), at(x + r).view()).unwrap()
                })
                .collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let dev = values.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
            assert!(dev < 0.05, "{activation:?} shift {r}: deviation {dev}");
        }
    }
}

#[test]
fn prior_variance_is_nearly_constant_over_states() {
    for activation in ACTIVATIONS {
        let policy = prior_policy(256, 0.5, activation, 8);
        let vars: Vec<f64> = (0..=200)
            .map(|k| policy.predictive(at(-5.0 + 0.05 * k as f64).view()).unwrap()[0].1)
            .collect();
        let mean = vars.iter().sum::<f64>() / vars.len() as f64;
        let sd = (vars.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vars.len() as f64).sqrt();
        assert!(
            sd / mean < 0.1,
            "{activation:?}: coefficient of variation {}",
            sd / mean
        );
    }
}

/// Midpoint rule over (-1, 1) with `n` cells.
fn integrate_density(policy: &HetStatPolicy, state: f64, n: usize) -> f64 {
    let h = 2.0 / n as f64;
    let states = Array2::from_elem((n, 1), state);
    let actions = Array2::from_shape_fn((n, 1), |(i, _)| -1.0 + h * (i as f64 + 0.5));
    let lp = policy.log_prob_batch(states.view(), actions.view()).unwrap();
    lp.mapv(f64::exp).sum() * h
}

fn wiggly_policy(seed: u64) -> HetStatPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = sample_feature_map(1, 32, 0.7, Activation::Sinusoid, seed).unwrap();
    let mean = Array1::from_shape_fn(32, |_| 0.4 * rng.random::<f64>() - 0.2);
    let chol = Array2::from_shape_fn((32, 32), |(i, j)| {
        if i == j {
            0.05 + 0.1 * rng.random::<f64>()
        } else if j < i {
            0.02 * (rng.random::<f64>() - 0.5)
        } else {
            0.0
        }
    });
    let head = GaussianHead::new(mean, chol, 0.5).unwrap();
    HetStatPolicy::new(map, vec![head], 1e-3, 1.0 - 1e-6).unwrap()
}

#[test]
fn squashed_density_integrates_to_one() {
    let policies = [prior_policy(64, 0.5, Activation::Sinusoid, 1), wiggly_policy(2)];
    for policy in &policies {
        for &s in &[-1.3, 0.2, 2.7] {
            let mass = integrate_density(policy, s, 100_000);
            assert!((mass - 1.0).abs() <= 0.02, "state {s}: mass {mass}");
        }
    }
}

/// E[tanh(z)] for z ~ N(m, v) by the trapezoid rule on m ± 12 sd.
fn tanh_mean_quadrature(m: f64, v: f64) -> f64 {
    let sd = v.sqrt();
    let n = 40_000;
    let h = 24.0 * sd / n as f64;
    (0..=n)
        .map(|k| {
            let z = m - 12.0 * sd + h * k as f64;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            w * z.tanh() * (-(z - m).powi(2) / (2.0 * v)).exp()
        })
        .sum::<f64>()
        * h
        / (2.0 * PI * v).sqrt()
}

#[test]
fn sample_mean_matches_quadrature() {
    let policy = wiggly_policy(5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &s in &[-0.8, 0.5] {
        let (m, v) = policy.predictive(at(s).view()).unwrap()[0];
        let n = 100_000;
        let total: f64 = (0..n)
            .map(|_| policy.sample_action(at(s).view(), &mut rng).unwrap()[0])
            .sum();
        let expected = tanh_mean_quadrature(m, v);
        assert!(
            (total / n as f64 - expected).abs() < 0.01,
            "{} vs {expected}",
            total / n as f64
        );
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let map = sample_feature_map(1, 16, 0.7, Activation::Sinusoid, 3).unwrap();
    let mut policy = HetStatPolicy::prior(map, 1, 0.6, 1e-3).unwrap();
    let mut p = policy.parameters();
    for x in p.iter_mut() {
        *x += 0.1 * rng.random::<f64>();
    }
    policy.set_parameters(p.view()).unwrap();
    let s = Array2::from_shape_fn((20, 1), |_| 2.0 * rng.random::<f64>() - 1.0);
    let a = s.mapv(|x| 0.9 * (0.5 * x).tanh());
    let demos = ContinuousDemoSet::new(s, a).unwrap();
    let lambda = 0.7;
    let (loss, grad) = bc_loss_grad(&policy, &demos, lambda).unwrap();
    assert!((loss - bc_loss(&policy, &policy, &demos, lambda).unwrap()).abs() < 1e-10);
    let h = 1e-5;
    for k in 0..p.len() {
        let shifted = |delta: f64| {
            let mut q = p.clone();
            q[k] += delta;
            let mut moved = policy.clone();
            moved.set_parameters(q.view()).unwrap();
            bc_loss(&moved, &policy, &demos, lambda).unwrap()
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
        assert!(rel < 1e-4, "parameter {k}: analytic {} vs numeric {fd}", grad[k]);
    }
}

#[test]
fn constant_target_is_fit_exactly_with_collapsing_variance() {
    // Five well-separated states, each demonstrated 40 times, without the KL
    // term so nothing pulls the fit away from the data.
    let n = 200;
    let s = Array2::from_shape_fn((n, 1), |(i, _)| -1.0 + 0.5 * (i % 5) as f64);
    let a = Array2::from_elem((n, 1), 0.3f64.tanh());
    let demos = ContinuousDemoSet::new(s.clone(), a).unwrap();
    let prior = prior_policy(32, 0.5, Activation::Sinusoid, 6);
    let cfg = FitConfig {
        lambda_kl: 0.0,
        learning_rate: 0.5,
        iterations: 2000,
        freeze_features: false,
    };
    let (fit, _) = fit_bc(&prior, &demos, &cfg).unwrap();
    for row in s.rows() {
        let (m, v) = fit.predictive(row).unwrap()[0];
        assert!((m - 0.3).abs() < 1e-3, "mean {m}");
        assert!(v < 2.0 * fit.sigma_min(), "variance {v}");
    }
}

#[test]
fn huge_kl_weight_keeps_the_prior_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = Array2::from_shape_fn((100, 1), |_| 2.0 * rng.random::<f64>() - 1.0);
    let a = s.mapv(|x| (1.5 * x).tanh());
    let demos = ContinuousDemoSet::new(s, a).unwrap();
    let prior = prior_policy(32, 0.5, Activation::Sinusoid, 2);
    let cfg = FitConfig {
        lambda_kl: 1e6,
        learning_rate: 0.1,
        iterations: 300,
        freeze_features: false,
    };
    let (fit, _) = fit_bc(&prior, &demos, &cfg).unwrap();
    let (h, h0) = (&fit.heads()[0], &prior.heads()[0]);
    let mean_gap = h.mean().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let chol_gap = (h.chol() - h0.chol()).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(mean_gap < 1e-3 && chol_gap < 1e-3, "mean {mean_gap}, factor {chol_gap}");
}

struct Heteroscedastic {
    demos: ContinuousDemoSet,
    fit: HetStatPolicy,
    prior: HetStatPolicy,
}

fn signal(x: f64) -> f64 {
    0.8 * (2.0 * x).sin()
}

fn noise_sd(x: f64) -> f64 {
    0.05 + 0.075 * (x + 1.0)
}

fn heteroscedastic_fit() -> Heteroscedastic {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 400;
    let s = Array2::from_shape_fn((n, 1), |_| 2.0 * rng.random::<f64>() - 1.0);
    let a = Array2::from_shape_fn((n, 1), |(i, _)| {
        let e: f64 = StandardNormal.sample(&mut rng);
        let x = s[[i, 0]];
        (signal(x) + noise_sd(x) * e).tanh()
    });
    let demos = ContinuousDemoSet::new(s, a).unwrap();
    let prior = prior_policy(128, 0.5, Activation::Sinusoid, 1);
    let cfg = FitConfig {
        lambda_kl: 1.0,
        learning_rate: 0.1,
        iterations: 2000,
        freeze_features: false,
    };
    let (fit, _) = fit_bc(&prior, &demos, &cfg).unwrap();
    Heteroscedastic { demos, fit, prior }
}

#[test]
fn heteroscedastic_fit_matches_plain_regression_and_tracks_noise() {
    let Heteroscedastic { demos, fit, prior } = heteroscedastic_fit();

    // Unregularized least squares on the initial features, the plain-MSE fit.
    let map = prior.feature_map();
    let (phi, _) = map.features_batch(demos.states().view()).unwrap();
    let z = prior.targets(demos.actions().view());
    let x = DMatrix::from_fn(phi.nrows(), phi.ncols(), |i, j| phi[[i, j]]);
    let y = DVector::from_fn(z.nrows(), |i, _| z[[i, 0]]);
    let w = x.clone().svd(true, true).solve(&y, 1e-10).unwrap();

    let grid: Vec<f64> = (0..=80).map(|k| -1.0 + 0.025 * k as f64).collect();
    let (mut se_fit, mut se_ls) = (0.0, 0.0);
    let (mut stds, mut truth) = (Vec::new(), Vec::new());
    for &g in &grid {
        let (m, v) = fit.predictive(at(g).view()).unwrap()[0];
        let f = map.features(at(g).view()).unwrap();
        let m_ls: f64 = f.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        se_fit += (m - signal(g)).powi(2);
        se_ls += (m_ls - signal(g)).powi(2);
        stds.push(v.sqrt());
        truth.push(noise_sd(g));
    }
    let (rmse_fit, rmse_ls) = ((se_fit / grid.len() as f64).sqrt(), (se_ls / grid.len() as f64).sqrt());
    assert!(rmse_fit <= 1.1 * rmse_ls, "fit {rmse_fit} vs least squares {rmse_ls}");
    let r = pearson(&stds, &truth);
    assert!(r > 0.9, "pearson {r}");
}

#[test]
fn variance_returns_to_the_prior_away_from_the_data() {
    let Heteroscedastic { fit, prior, .. } = heteroscedastic_fit();
    let ell = prior.feature_map().lengthscale();
    for k in 0..=20 {
        let offset = 3.0 * ell + 0.05 * k as f64;
        for s in [-1.0 - offset, 1.0 + offset] {
            let v = fit.predictive(at(s).view()).unwrap()[0].1;
            let v0 = prior.predictive(at(s).view()).unwrap()[0].1;
            assert!((v - v0).abs() <= 0.2 * v0, "state {s}: variance {v} vs prior {v0}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn predictive_variance_never_drops_below_the_floor(seed in any::<u64>(), s in -20.0f64..20.0) {
        let policy = wiggly_policy(seed);
        let (_, v) = policy.predictive(at(s).view()).unwrap()[0];
        prop_assert!(v >= policy.sigma_min());
    }

    #[test]
    fn samples_stay_inside_the_open_cube(seed in any::<u64>(), s in -5.0f64..5.0) {
        let policy = wiggly_policy(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let a = policy.sample_action(at(s).view(), &mut rng).unwrap()[0];
            prop_assert!(a > -1.0 && a < 1.0);
        }
    }

    #[test]
    fn log_prob_is_finite_up_to_the_edges(seed in any::<u64>(), s in -5.0f64..5.0, a in -1.0f64..=1.0) {
        let policy = wiggly_policy(seed);
        prop_assert!(policy.log_prob(at(s).view(), array![a].view()).unwrap().is_finite());
    }

    #[test]
    fn feature_maps_are_reproducible(seed in any::<u64>(), n in 1usize..64, ell in 0.05f64..5.0) {
        let a = sample_feature_map(2, n, ell, Activation::Triangular, seed).unwrap();
        let b = sample_feature_map(2, n, ell, Activation::Triangular, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
