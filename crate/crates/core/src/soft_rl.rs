//! Entropy-regularized dynamic programming against a prior policy.
//!
//! With temperature `alpha` and prior `p`, the soft backup is
//!
//! ```text
//! Q(s, a) = r(s, a) + gamma * E_{s'}[V(s')]
//! V(s)    = alpha * log sum_a p(a|s) exp(Q(s, a) / alpha)
//! q(a|s)  = p(a|s) exp((Q(s, a) - V(s)) / alpha)
//! ```
//!
//! and a policy/value pair can be mapped back to the reward that makes it
//! soft-optimal.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::mdp::{check_policy_shape, TabularMdp, TabularPolicy};

pub const DEFAULT_TOL: f64 = 1e-10;

/// Iteration cap used when none is given: ten times the effective horizon
/// needed to shrink an error by `1e-10`.
pub fn default_max_iter(discount: f64) -> usize {
    if discount <= 0.0 {
        return 100;
    }
    let horizon = (DEFAULT_TOL.ln() / discount.ln()).ceil() as usize;
    (10 * horizon).max(100)
}

/// Reward table over `(state, action)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    r: Array2<f64>,
}

impl RewardTable {
    pub fn new(r: Array2<f64>) -> Result<Self> {
        if r.iter().any(|x| !x.is_finite()) {
            return Err(invalid_arg("reward table has non-finite entries"));
        }
        Ok(Self { r })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            r: Array2::zeros((n_states, n_actions)),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.r
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.r
    }

    pub fn max_abs_diff(&self, other: &RewardTable) -> f64 {
        Zip::from(&self.r)
            .and(&other.r)
            .fold(0.0, |m, a, b| f64::max(m, (a - b).abs()))
    }

    /// `state,action,value` rows.
    pub fn to_csv(&self) -> String {
        table_csv(&self.r)
    }
}

pub(crate) fn table_csv(table: &Array2<f64>) -> String {
    let mut out = String::from("state,action,value\n");
    for ((s, a), v) in table.indexed_iter() {
        let _ = writeln!(out, "{s},{a},{v}");
    }
    out
}

/// Result of soft value iteration.
#[derive(Clone, Debug)]
pub struct SoftSolution {
    pub q_table: Array2<f64>,
    pub v_table: Array1<f64>,
    pub policy: TabularPolicy,
    pub temperature: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl SoftSolution {
    pub fn q_csv(&self) -> String {
        table_csv(&self.q_table)
    }
}

/// Stable `alpha * log sum_a p(a) exp(q(a) / alpha)` over the prior's support,
/// together with the normalized posterior row.
fn soft_max_row(q: ndarray::ArrayView1<f64>, prior: ndarray::ArrayView1<f64>, alpha: f64) -> (f64, Array1<f64>) {
    let shift = q
        .iter()
        .zip(prior)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&x, _)| x / alpha)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights = Array1::zeros(q.len());
    let mut total = 0.0;
    for (i, (&x, &p)) in q.iter().zip(prior).enumerate() {
        if p > 0.0 {
            let w = p * (x / alpha - shift).exp();
            weights[i] = w;
            total += w;
        }
    }
    let value = alpha * (shift + total.ln());
    weights.mapv_inplace(|w| w / total);
    (value, weights)
}

fn soft_values(q: &Array2<f64>, prior: &TabularPolicy, alpha: f64) -> Array1<f64> {
    Array1::from_iter(q.outer_iter().zip(prior.probs().outer_iter()).map(|(row, p)| {
        let shift = row
            .iter()
            .zip(p)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&x, _)| x / alpha)
            .fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row
            .iter()
            .zip(p)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&x, &w)| w * (x / alpha - shift).exp())
            .sum();
        alpha * (shift + total.ln())
    }))
}

/// Boltzmann posterior `q(a|s) ∝ p(a|s) exp(Q(s,a)/alpha)` and its log-partition `V`.
pub fn posterior_policy(
    q_table: &Array2<f64>,
    prior: &TabularPolicy,
    alpha: f64,
) -> Result<(TabularPolicy, Array1<f64>)> {
    if !(alpha > 0.0) {
        return Err(invalid_arg(format!("temperature must be positive, got {alpha}")));
    }
    if q_table.dim() != prior.probs().dim() {
        return Err(invalid_arg("Q table and prior have different shapes"));
    }
    if q_table.iter().any(|x| !x.is_finite()) {
        return Err(invalid_arg("Q table has non-finite entries"));
    }
    let mut probs = Array2::zeros(q_table.dim());
    let mut values = Array1::zeros(q_table.nrows());
    for (s, (row, p)) in q_table.outer_iter().zip(prior.probs().outer_iter()).enumerate() {
        let (v, w) = soft_max_row(row, p, alpha);
        values[s] = v;
        probs.row_mut(s).assign(&w);
    }
    Ok((TabularPolicy::from_weights(probs)?, values))
}

/// One application of the soft Bellman operator to `q`.
pub fn soft_bellman_backup(
    mdp: &TabularMdp,
    reward: &Array2<f64>,
    prior: &TabularPolicy,
    alpha: f64,
    q: &Array2<f64>,
) -> Array2<f64> {
    let v = soft_values(q, prior, alpha);
    let mut next = mdp.expected_next(&v);
    next.mapv_inplace(|x| mdp.discount() * x);
    next + reward
}

/// Solver settings for [`solve_soft`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftViConfig {
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl SoftViConfig {
    pub fn new(alpha: f64, discount: f64) -> Self {
        Self {
            alpha,
            tol: DEFAULT_TOL,
            max_iter: default_max_iter(discount),
        }
    }
}

/// Soft value iteration on the MDP's own reward.
pub fn soft_value_iteration(
    mdp: &TabularMdp,
    prior: &TabularPolicy,
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SoftSolution> {
    solve_soft(mdp, mdp.reward(), prior, &SoftViConfig { alpha, tol, max_iter }, None)
}

/// Soft value iteration for an explicit reward, optionally warm-started from `init_q`.
pub fn solve_soft(
    mdp: &TabularMdp,
    reward: &Array2<f64>,
    prior: &TabularPolicy,
    config: &SoftViConfig,
    init_q: Option<&Array2<f64>>,
) -> Result<SoftSolution> {
    let alpha = config.alpha;
    if !(alpha > 0.0) {
        return Err(invalid_arg(format!("temperature must be positive, got {alpha}")));
    }
    check_policy_shape(mdp, prior)?;
    if reward.dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(invalid_arg("reward shape does not match MDP"));
    }
    let mut q = match init_q {
        Some(q0) if q0.dim() == reward.dim() => q0.clone(),
        Some(_) => return Err(invalid_arg("warm-start Q has the wrong shape")),
        None => Array2::zeros(reward.dim()),
    };
    let mut residual = f64::INFINITY;
    for iteration in 1..=config.max_iter {
        let next = soft_bellman_backup(mdp, reward, prior, alpha, &q);
        residual = Zip::from(&next).and(&q).fold(0.0, |m, a, b| f64::max(m, (a - b).abs()));
        q = next;
        if !residual.is_finite() {
            return Err(Error::Convergence {
                iterations: iteration,
                residual,
            });
        }
        if residual < config.tol {
            let (policy, v_table) = posterior_policy(&q, prior, alpha)?;
            return Ok(SoftSolution {
                q_table: q,
                v_table,
                policy,
                temperature: alpha,
                iterations: iteration,
                residual,
            });
        }
    }
    Err(Error::Convergence {
        iterations: config.max_iter,
        residual,
    })
}

/// The reward for which `(policy, v_table)` is the soft-optimal solution:
/// `r(s,a) = alpha log(q/p) + V(s) - gamma E[V(s')]`.
///
/// Pairs with `q = p = 0` take a zero log-ratio.
pub fn invert_policy_to_reward(
    policy: &TabularPolicy,
    v_table: &Array1<f64>,
    prior: &TabularPolicy,
    alpha: f64,
    mdp: &TabularMdp,
) -> Result<RewardTable> {
    if !(alpha > 0.0) {
        return Err(invalid_arg(format!("temperature must be positive, got {alpha}")));
    }
    check_policy_shape(mdp, policy)?;
    check_policy_shape(mdp, prior)?;
    if v_table.len() != mdp.n_states() {
        return Err(invalid_arg("value vector length does not match n_states"));
    }
    let log_ratio = log_ratio(policy, prior, alpha)?;
    let next_v = mdp.expected_next(v_table);
    let mut r = log_ratio;
    for ((s, a), x) in r.indexed_iter_mut() {
        *x += v_table[s] - mdp.discount() * next_v[[s, a]];
    }
    RewardTable::new(r)
}

/// `alpha (log q - log p)` with the support convention `0 log 0/0 = 0`.
pub(crate) fn log_ratio(policy: &TabularPolicy, prior: &TabularPolicy, alpha: f64) -> Result<Array2<f64>> {
    if policy.probs().dim() != prior.probs().dim() {
        return Err(invalid_arg("policy and prior have different shapes"));
    }
    let mut out = Array2::zeros(policy.probs().dim());
    for ((s, a), &q) in policy.probs().indexed_iter() {
        let p = prior.probs()[[s, a]];
        out[[s, a]] = match (q > 0.0, p > 0.0) {
            (false, false) => 0.0,
            (true, false) => {
                return Err(invalid_arg(format!(
                    "support violation at ({s}, {a}): policy has mass where the prior has none"
                )))
            }
            (false, true) => {
                return Err(invalid_arg(format!(
                    "policy has zero mass at ({s}, {a}); the log-ratio is unbounded"
                )))
            }
            (true, true) => alpha * (q.ln() - p.ln()),
        };
    }
    Ok(out)
}

/// Potential-based shaping, `r~(s,a) = r(s,a) - Psi(s) + gamma E[Psi(s')]`.
pub fn shape_reward(reward: &RewardTable, potential: &Array1<f64>, mdp: &TabularMdp) -> Result<RewardTable> {
    if potential.len() != mdp.n_states() {
        return Err(invalid_arg("potential length does not match n_states"));
    }
    if potential.iter().any(|x| !x.is_finite()) {
        return Err(invalid_arg("potential has non-finite entries"));
    }
    let next = mdp.expected_next(potential);
    let mut r = reward.values().clone();
    for ((s, a), x) in r.indexed_iter_mut() {
        *x += mdp.discount() * next[[s, a]] - potential[s];
    }
    RewardTable::new(r)
}
