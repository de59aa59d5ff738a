//! Seeded property suites behind `softimit verify`.

use std::fmt;
use std::str::FromStr;

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use softimit_core::coherent::kl_penalty;
use softimit_core::imitation::coherent_reward_tabular;
use softimit_core::mdp::{TabularMdp, TabularPolicy};
use softimit_core::soft_rl::{invert_policy_to_reward, shape_reward, solve_soft, SoftViConfig};
use softimit_core::stationary::{bc_loss, bc_loss_grad, sample_feature_map, Activation, ContinuousDemoSet};
use softimit_core::HetStatPolicy;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Inversion,
    Shaping,
    Coherence,
    Stationarity,
    Gradients,
    Estimator,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Inversion,
        Suite::Shaping,
        Suite::Coherence,
        Suite::Stationarity,
        Suite::Gradients,
        Suite::Estimator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Inversion => "inversion",
            Suite::Shaping => "shaping",
            Suite::Coherence => "coherence",
            Suite::Stationarity => "stationarity",
            Suite::Gradients => "gradients",
            Suite::Estimator => "estimator",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown suite `{s}`")))
    }
}

/// Outcome of one property: the worst measured value against its tolerance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub name: String,
    pub cases: usize,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl PropertyCheck {
    /// Passes when `measured < tolerance`.
    fn below(name: &str, cases: usize, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            cases,
            measured,
            tolerance,
            passed: measured < tolerance,
        }
    }
}

impl fmt::Display for PropertyCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: worst {:.3e} (tolerance {:.1e}) over {} cases",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.cases
        )
    }
}

const DISCOUNTS: [f64; 3] = [0.5, 0.9, 0.99];
const TEMPERATURES: [f64; 3] = [0.1, 1.0, 10.0];

fn positive_policy<R: Rng>(rng: &mut R, ns: usize, na: usize) -> Result<TabularPolicy> {
    Ok(TabularPolicy::from_weights(Array2::from_shape_fn((ns, na), |_| {
        rng.random::<f64>() + 0.01
    }))?)
}

fn random_case<R: Rng>(rng: &mut R) -> Result<(TabularMdp, f64)> {
    let ns = rng.random_range(1..=20);
    let na = rng.random_range(1..=5);
    let gamma = DISCOUNTS[rng.random_range(0..DISCOUNTS.len())];
    let alpha = TEMPERATURES[rng.random_range(0..TEMPERATURES.len())];
    Ok((TabularMdp::random(ns, na, gamma, rng)?, alpha))
}

fn sup(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

/// Soft-optimal policy, inverse to a reward, for 100 random MDPs.
pub fn inversion(seed: u64, cases: usize) -> Result<Vec<PropertyCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (mdp, alpha) = random_case(&mut rng)?;
        let prior = positive_policy(&mut rng, mdp.n_states(), mdp.n_actions())?;
        let sol = solve_soft(
            &mdp,
            mdp.reward(),
            &prior,
            &SoftViConfig::new(alpha, mdp.discount()),
            None,
        )?;
        let r = invert_policy_to_reward(&sol.policy, &sol.v_table, &prior, alpha, &mdp)?;
        worst = worst.max(sup(&(r.values() - mdp.reward())));
    }
    Ok(vec![PropertyCheck::below(
        "reward round trip sup error",
        cases,
        worst,
        1e-6,
    )])
}

/// Soft VI on the coherent reward of a positive policy returns that policy
/// with zero values.
pub fn coherence(seed: u64, cases: usize) -> Result<Vec<PropertyCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tv, mut v): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let (mdp, alpha) = random_case(&mut rng)?;
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let policy = positive_policy(&mut rng, ns, na)?;
        let prior = TabularPolicy::uniform(ns, na);
        let reward = coherent_reward_tabular(&policy, &prior, alpha)?;
        let sol = solve_soft(
            &mdp,
            reward.values(),
            &prior,
            &SoftViConfig::new(alpha, mdp.discount()),
            None,
        )?;
        tv = tv.max(sol.policy.max_tv(&policy));
        v = v.max(sol.v_table.iter().fold(0.0, |m: f64, x| m.max(x.abs())));
    }
    Ok(vec![
        PropertyCheck::below("recovered policy total variation", cases, tv, 1e-6),
        PropertyCheck::below("soft value sup norm", cases, v, 1e-6),
    ])
}

/// Potential shaping leaves the soft-optimal policy unchanged.
pub fn shaping(seed: u64, cases: usize) -> Result<Vec<PropertyCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (mdp, alpha) = random_case(&mut rng)?;
        let prior = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
        let potential = Array1::from_shape_fn(mdp.n_states(), |_| rng.random_range(-5.0..5.0));
        let reward = softimit_core::RewardTable::new(mdp.reward().clone())?;
        let shaped = shape_reward(&reward, &potential, &mdp)?;
        let config = SoftViConfig::new(alpha, mdp.discount());
        let base = solve_soft(&mdp, reward.values(), &prior, &config, None)?;
        let moved = solve_soft(&mdp, shaped.values(), &prior, &config, None)?;
        worst = worst.max(base.policy.max_tv(&moved.policy));
    }
    Ok(vec![PropertyCheck::below(
        "policy total variation under shaping",
        cases,
        worst,
        1e-8,
    )])
}

/// The 2048-feature sinusoid map against the squared-exponential kernel, and
/// shift-only dependence for every activation.
pub fn stationarity(seed: u64) -> Result<Vec<PropertyCheck>> {
    let map = sample_feature_map(1, 2048, 1.0, Activation::Sinusoid, seed)?;
    let n_lags = 601;
    let mut kernel: f64 = 0.0;
    for k in 0..n_lags {
        let r = -3.0 + 6.0 * k as f64 / (n_lags - 1) as f64;
        let c = map.covariance(array![0.0].view(), array![r].view())?;
        kernel = kernel.max((c - (-0.5 * r * r).exp()).abs());
    }
    let mut checks = vec![PropertyCheck::below(
        "sinusoid covariance vs squared-exponential kernel",
        n_lags,
        kernel,
        0.05,
    )];
    for activation in [Activation::Sinusoid, Activation::Triangular, Activation::PeriodicRelu] {
        let map = sample_feature_map(1, 2048, 1.0, activation, seed)?;
        let mut dev: f64 = 0.0;
        let lags = [0.0, 0.3, 1.0, 2.5];
        for &r in &lags {
            let values = (0..=50)
                .map(|k| {
                    let x = -5.0 + 0.2 * k as f64;
                    map.covariance(array![x].view(), array![x + r].view())
                })
                .collect::<softimit_core::Result<Vec<f64>>>()?;
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            dev = dev.max(values.iter().fold(0.0, |m: f64, v| m.max((v - mean).abs())));
        }
        checks.push(PropertyCheck::below(
            &format!("{} covariance deviation along shifts", activation.name()),
            lags.len() * 51,
            dev,
            0.05,
        ));
    }
    Ok(checks)
}

/// Analytic fitting-loss gradients of a 16-feature model against central
/// differences.
pub fn gradients(seed: u64) -> Result<Vec<PropertyCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = sample_feature_map(1, 16, 0.7, Activation::Sinusoid, seed)?;
    let mut policy = HetStatPolicy::prior(map, 1, 0.6, 1e-3)?;
    let mut p = policy.parameters();
    for x in p.iter_mut() {
        *x += 0.1 * rng.random::<f64>();
    }
    policy.set_parameters(p.view())?;
    let s = Array2::from_shape_fn((20, 1), |_| 2.0 * rng.random::<f64>() - 1.0);
    let a = s.mapv(|x| 0.9 * (0.5 * x).tanh());
    let demos = ContinuousDemoSet::new(s, a)?;
    let lambda = 0.7;
    let (_, grad) = bc_loss_grad(&policy, &demos, lambda)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..p.len() {
        let at = |delta: f64| -> Result<f64> {
            let mut q = p.clone();
            q[k] += delta;
            let mut moved = policy.clone();
            moved.set_parameters(q.view())?;
            Ok(bc_loss(&moved, &policy, &demos, lambda)?)
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        worst = worst.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8));
    }
    Ok(vec![PropertyCheck::below(
        "gradient relative error",
        p.len(),
        worst,
        1e-4,
    )])
}

/// Sampled values of `r - 1 + exp(-r)` on `[-20, 20]`. The penalty may only
/// come within 1e-12 of zero where `|r|` is small enough for the quadratic
/// term `r^2 / 2` to be below 1e-12.
pub fn estimator(seed: u64, samples: usize) -> Result<Vec<PropertyCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let near_zero = (2.0f64 * 1e-12).sqrt() * 1.01;
    let mut negatives = 0usize;
    let mut spurious = 0usize;
    let mut min_value = f64::INFINITY;
    let draws = std::iter::once(0.0).chain((0..samples).map(|_| rng.random_range(-20.0..=20.0)));
    for r in draws {
        let k = kl_penalty(r);
        min_value = min_value.min(k);
        negatives += usize::from(k < 0.0);
        spurious += usize::from(k <= 1e-12 && r.abs() > near_zero);
    }
    let at_zero = kl_penalty(0.0).abs();
    Ok(vec![
        PropertyCheck {
            name: "negative penalties".into(),
            cases: samples + 1,
            measured: negatives as f64,
            tolerance: 0.0,
            passed: negatives == 0 && min_value >= 0.0,
        },
        PropertyCheck {
            name: "near-zero penalties away from r = 0".into(),
            cases: samples + 1,
            measured: spurious as f64,
            tolerance: 0.0,
            passed: spurious == 0,
        },
        PropertyCheck {
            name: "penalty at r = 0".into(),
            cases: 1,
            measured: at_zero,
            tolerance: 1e-12,
            passed: at_zero <= 1e-12,
        },
    ])
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<PropertyCheck>> {
    match suite {
        Suite::Inversion => inversion(seed, 100),
        Suite::Shaping => shaping(seed, 50),
        Suite::Coherence => coherence(seed, 50),
        Suite::Stationarity => stationarity(seed),
        Suite::Gradients => gradients(seed),
        Suite::Estimator => estimator(seed, 1_000_000),
    }
}
