//! Tabular imitation learners: behavioral cloning, the coherent reward and
//! CSIL, an oracle classifier reward, ME-IRL and a closed-form GAIL.
//!
//! Learners see the dynamics but not the reward. They return a [`Learned`]
//! agent; [`ImitationResult::evaluate`] scores it on the true nominal and
//! windy MDPs.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::mdp::{expected_return, occupancy_from, DemoSet, TabularMdp, TabularPolicy};
use crate::soft_rl::{log_ratio, solve_soft, RewardTable, SoftViConfig};

/// A trained tabular agent before evaluation.
#[derive(Clone, Debug)]
pub struct Learned {
    pub policy: TabularPolicy,
    pub reward: Option<RewardTable>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl Learned {
    pub fn policy_only(policy: TabularPolicy) -> Self {
        Self {
            policy,
            reward: None,
            diagnostics: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImitationResult {
    pub policy: TabularPolicy,
    pub reward: Option<RewardTable>,
    pub nominal_return: f64,
    pub windy_return: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl ImitationResult {
    pub fn evaluate(learned: Learned, nominal: &TabularMdp, windy: &TabularMdp) -> Result<Self> {
        let nominal_return = expected_return(nominal, &learned.policy)?;
        let windy_return = expected_return(windy, &learned.policy)?;
        Ok(Self {
            policy: learned.policy,
            reward: learned.reward,
            nominal_return,
            windy_return,
            diagnostics: learned.diagnostics,
        })
    }
}

/// Count-based cloning mixed with the prior.
///
/// A visited state gets `(counts + smoothing * prior) / (n + smoothing)`;
/// an unvisited state keeps the prior row.
pub fn bc_tabular(demos: &DemoSet, prior: &TabularPolicy, smoothing: f64) -> Result<TabularPolicy> {
    if demos.is_empty() {
        return Err(invalid_arg("behavioral cloning needs at least one demonstration"));
    }
    if !(smoothing >= 0.0) || !smoothing.is_finite() {
        return Err(invalid_arg(format!("smoothing must be nonnegative, got {smoothing}")));
    }
    if prior.probs().dim() != demos.counts().dim() {
        return Err(invalid_arg("prior shape does not match demonstrations"));
    }
    let mut probs = prior.probs().clone();
    for &s in demos.visited_states() {
        let counts = demos.counts().row(s);
        let total = counts.sum() as f64 + smoothing;
        for a in 0..demos.n_actions() {
            probs[[s, a]] = (counts[a] as f64 + smoothing * prior.probs()[[s, a]]) / total;
        }
    }
    TabularPolicy::from_weights(probs)
}

/// `alpha (log q - log p)`: positive where the cloned policy is more
/// confident than the prior, negative where less, zero where they agree.
pub fn coherent_reward_tabular(policy: &TabularPolicy, prior: &TabularPolicy, alpha: f64) -> Result<RewardTable> {
    if !(alpha > 0.0) {
        return Err(invalid_arg(format!("temperature must be positive, got {alpha}")));
    }
    RewardTable::new(log_ratio(policy, prior, alpha)?)
}

/// Which policy regularizes the soft policy-iteration stage of CSIL.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetunePrior {
    /// The prior used to define the coherent reward.
    #[default]
    Reward,
    /// The cloned policy itself.
    Cloned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsilConfig {
    /// Temperature of the coherent reward.
    pub alpha: f64,
    /// Temperature of the soft policy iteration on that reward.
    pub beta: f64,
    pub smoothing: f64,
    pub finetune_prior: FinetunePrior,
}

impl Default for CsilConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            smoothing: 1.0,
            finetune_prior: FinetunePrior::Reward,
        }
    }
}

/// Coherent soft imitation learning with known dynamics: clone, define the
/// coherent reward at temperature `alpha`, then run soft value iteration on
/// that fixed reward at temperature `beta <= alpha`.
pub fn csil_tabular(
    mdp_no_reward: &TabularMdp,
    demos: &DemoSet,
    prior: &TabularPolicy,
    config: &CsilConfig,
) -> Result<Learned> {
    if !(config.beta > 0.0) || config.beta > config.alpha {
        return Err(invalid_arg(format!(
            "CSIL needs 0 < beta <= alpha, got beta = {} and alpha = {}",
            config.beta, config.alpha
        )));
    }
    let bc = bc_tabular(demos, prior, config.smoothing)?;
    let reward = coherent_reward_tabular(&bc, prior, config.alpha)?;
    let finetune_prior = match config.finetune_prior {
        FinetunePrior::Reward => prior,
        FinetunePrior::Cloned => &bc,
    };
    let sol = solve_soft(
        mdp_no_reward,
        reward.values(),
        finetune_prior,
        &SoftViConfig::new(config.beta, mdp_no_reward.discount()),
        None,
    )?;
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("tv_from_bc".to_string(), sol.policy.max_tv(&bc));
    diagnostics.insert(
        "max_abs_soft_value".to_string(),
        sol.v_table.iter().fold(0.0, |m, v| f64::max(m, v.abs())),
    );
    diagnostics.insert("soft_vi_iterations".to_string(), sol.iterations as f64);
    Ok(Learned {
        policy: sol.policy,
        reward: Some(reward),
        diagnostics,
    })
}

/// One on every demonstrated `(s, a)`, zero elsewhere.
pub fn classifier_reward(demos: &DemoSet, n_states: usize, n_actions: usize) -> Result<RewardTable> {
    if demos.counts().dim() != (n_states, n_actions) {
        return Err(invalid_arg("demonstrations do not match the requested shape"));
    }
    RewardTable::new(demos.counts().mapv(|c| if c > 0 { 1.0 } else { 0.0 }))
}

/// Soft-optimal policy for the classifier reward.
pub fn classifier_tabular(mdp_no_reward: &TabularMdp, demos: &DemoSet, alpha: f64) -> Result<Learned> {
    let reward = classifier_reward(demos, mdp_no_reward.n_states(), mdp_no_reward.n_actions())?;
    let prior = TabularPolicy::uniform(mdp_no_reward.n_states(), mdp_no_reward.n_actions());
    let sol = solve_soft(
        mdp_no_reward,
        reward.values(),
        &prior,
        &SoftViConfig::new(alpha, mdp_no_reward.discount()),
        None,
    )?;
    Ok(Learned {
        policy: sol.policy,
        reward: Some(reward),
        diagnostics: BTreeMap::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeIrlConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for MeIrlConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            learning_rate: 0.1,
            iterations: 500,
        }
    }
}

/// Expected discounted one-hot features `rho(s, a) = d(s, a) / (1 - gamma)`
/// of a policy from `start`.
pub fn policy_feature_expectation(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    start: &Array1<f64>,
) -> Result<Array2<f64>> {
    let occ = occupancy_from(mdp, policy, start)?;
    Ok(occ.d / (1.0 - mdp.discount()))
}

/// Maximum-entropy IRL with one-hot `(s, a)` features.
///
/// Expert features are the discounted empirical visitation of the
/// demonstrations, and the learner's features are computed exactly from
/// the demonstrations' empirical start distribution.
pub fn meirl_tabular(mdp_no_reward: &TabularMdp, demos: &DemoSet, config: &MeIrlConfig) -> Result<Learned> {
    let expert = demos.discounted_visitation(mdp_no_reward)?;
    let start = demos.start_distribution()?;
    meirl_from_features(mdp_no_reward, &expert, &start, config)
}

/// Dual ascent `w <- w + lr (E_D[phi] - E_rho[phi])` from `w = 0`.
pub fn meirl_from_features(
    mdp_no_reward: &TabularMdp,
    expert_features: &Array2<f64>,
    start: &Array1<f64>,
    config: &MeIrlConfig,
) -> Result<Learned> {
    if config.iterations == 0 {
        return Err(invalid_arg("ME-IRL needs at least one iteration"));
    }
    let (ns, na) = (mdp_no_reward.n_states(), mdp_no_reward.n_actions());
    if expert_features.dim() != (ns, na) {
        return Err(invalid_arg("expert features do not match MDP shape"));
    }
    let prior = TabularPolicy::uniform(ns, na);
    let vi = SoftViConfig::new(config.alpha, mdp_no_reward.discount());
    let mut w = Array2::<f64>::zeros((ns, na));
    let mut warm: Option<Array2<f64>> = None;
    let mut gap = f64::INFINITY;
    let mut policy = prior.clone();
    let mut inner_iterations = 0usize;
    for _ in 0..config.iterations {
        let sol = solve_soft(mdp_no_reward, &w, &prior, &vi, warm.as_ref())?;
        inner_iterations += sol.iterations;
        let learner = policy_feature_expectation(mdp_no_reward, &sol.policy, start)?;
        let grad = expert_features - &learner;
        gap = grad.iter().fold(0.0, |m, g| f64::max(m, g.abs()));
        w.scaled_add(config.learning_rate, &grad);
        policy = sol.policy;
        warm = Some(sol.q_table);
    }
    // Final policy is soft-optimal for the final weights.
    let sol = solve_soft(mdp_no_reward, &w, &prior, &vi, warm.as_ref())?;
    let learner = policy_feature_expectation(mdp_no_reward, &sol.policy, start)?;
    let final_gap = Zip::from(expert_features)
        .and(&learner)
        .fold(0.0, |m, a, b| f64::max(m, (a - b).abs()));
    policy = if final_gap.is_finite() { sol.policy } else { policy };
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("feature_gap".to_string(), final_gap);
    diagnostics.insert("last_step_gap".to_string(), gap);
    diagnostics.insert("inner_iterations".to_string(), inner_iterations as f64);
    Ok(Learned {
        policy,
        reward: Some(RewardTable::new(w)?),
        diagnostics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GailConfig {
    pub alpha: f64,
    pub outer_iterations: usize,
    /// Additive smoothing applied to both occupancies before taking their ratio.
    pub ratio_smoothing: f64,
}

impl Default for GailConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            outer_iterations: 100,
            ratio_smoothing: 1e-5,
        }
    }
}

/// Optimal discriminator and its reward `log D - log(1 - D)` for two
/// occupancies, with `D = (d_E + eps) / (d_E + d_q + 2 eps)`.
pub fn discriminator_reward(expert: &Array2<f64>, learner: &Array2<f64>, smoothing: f64) -> (Array2<f64>, Array2<f64>) {
    let mut disc = Array2::zeros(expert.dim());
    let mut reward = Array2::zeros(expert.dim());
    Zip::from(&mut disc)
        .and(&mut reward)
        .and(expert)
        .and(learner)
        .for_each(|d, r, &e, &q| {
            let (e, q) = (e + smoothing, q + smoothing);
            *d = e / (e + q);
            *r = e.ln() - q.ln();
        });
    (disc, reward)
}

/// Adversarial imitation with an exact discriminator.
///
/// Each round fits the optimal discriminator between the expert's and the
/// learner's normalized occupancies, then re-solves the soft-optimal policy
/// for the reward `log D - log(1 - D)`.
pub fn gail_tabular(mdp_no_reward: &TabularMdp, demos: &DemoSet, config: &GailConfig) -> Result<Learned> {
    if config.outer_iterations == 0 {
        return Err(invalid_arg("GAIL needs at least one outer iteration"));
    }
    if !(config.ratio_smoothing >= 0.0) {
        return Err(invalid_arg("ratio smoothing must be nonnegative"));
    }
    let (ns, na) = (mdp_no_reward.n_states(), mdp_no_reward.n_actions());
    let expert = demos.empirical_occupancy(mdp_no_reward)?;
    let start = demos.start_distribution()?;
    let prior = TabularPolicy::uniform(ns, na);
    let vi = SoftViConfig::new(config.alpha, mdp_no_reward.discount());
    let mut policy = prior.clone();
    let mut reward = Array2::<f64>::zeros((ns, na));
    let mut warm: Option<Array2<f64>> = None;
    let mut mean_disc = 0.5;
    let mut learner = Array2::<f64>::zeros((ns, na));
    for k in 0..config.outer_iterations {
        // Running mean of the learner occupancies seen so far; a plain best
        // response to the latest occupancy cycles with period two.
        let latest = occupancy_from(mdp_no_reward, &policy, &start)?.d;
        let step = 1.0 / (k as f64 + 1.0);
        learner = &learner * (1.0 - step) + &latest * step;
        let (disc, r) = discriminator_reward(&expert, &learner, config.ratio_smoothing);
        mean_disc = (&disc * &expert).sum();
        reward = r;
        let sol = solve_soft(mdp_no_reward, &reward, &prior, &vi, warm.as_ref())?;
        policy = sol.policy;
        warm = Some(sol.q_table);
    }
    let learner = occupancy_from(mdp_no_reward, &policy, &start)?.d;
    let tv = 0.5
        * Zip::from(&expert)
            .and(&learner)
            .fold(0.0, |acc, a, b| acc + (a - b).abs());
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("occupancy_tv".to_string(), tv);
    diagnostics.insert("expert_discriminator_mean".to_string(), mean_disc);
    Ok(Learned {
        policy,
        reward: Some(RewardTable::new(reward)?),
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_gridworld, GridSpec, Transition};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn demo(pairs: &[(usize, usize)], ns: usize, na: usize) -> DemoSet {
        let transitions = pairs
            .iter()
            .enumerate()
            .map(|(t, &(state, action))| Transition {
                episode: 0,
                t,
                state,
                action,
                next_state: state,
            })
            .collect();
        DemoSet::from_transitions(ns, na, transitions).unwrap()
    }

    #[test]
    fn bc_frequencies_and_fallback() {
        let d = demo(&[(0, 0), (0, 0), (0, 0), (0, 1)], 2, 2);
        let prior = TabularPolicy::uniform(2, 2);
        let raw = bc_tabular(&d, &prior, 0.0).unwrap();
        assert_abs_diff_eq!(raw.probs()[[0, 0]], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(raw.probs()[[0, 1]], 0.25, epsilon = 1e-15);
        assert_eq!(raw.row(1), prior.row(1));
        let smoothed = bc_tabular(&d, &prior, 4.0).unwrap();
        assert_abs_diff_eq!(smoothed.probs()[[0, 0]], 0.625, epsilon = 1e-15);
        assert_abs_diff_eq!(smoothed.probs()[[0, 1]], 0.375, epsilon = 1e-15);
        assert!(bc_tabular(&DemoSet::empty(2, 2), &prior, 1.0).is_err());
    }

    #[test]
    fn coherent_reward_cases() {
        let p = TabularPolicy::uniform(1, 4);
        assert!(coherent_reward_tabular(&p, &p, 1.0)
            .unwrap()
            .values()
            .iter()
            .all(|&r| r == 0.0));
        // A cloned one-hot row gives log|A| on the demonstrated action; the
        // others are unbounded below, which smoothing avoids.
        let one_hot = TabularPolicy::new(array![[0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert!(coherent_reward_tabular(&one_hot, &p, 1.0).is_err());
        let d = demo(&[(0, 1)], 1, 4);
        let smoothed = bc_tabular(&d, &p, 1e-9).unwrap();
        let r = coherent_reward_tabular(&smoothed, &p, 1.0).unwrap();
        assert_abs_diff_eq!(r.values()[[0, 1]], 4f64.ln(), epsilon = 1e-8);
        assert!(r.values()[[0, 0]] < -15.0);
    }

    #[test]
    fn csil_rejects_hotter_finetuning() {
        let mdp = build_gridworld(&GridSpec::dense_default()).unwrap().without_reward();
        let d = demo(&[(9, 0)], 64, 4);
        let cfg = CsilConfig {
            beta: 2.0,
            ..CsilConfig::default()
        };
        assert!(csil_tabular(&mdp, &d, &TabularPolicy::uniform(64, 4), &cfg).is_err());
    }

    #[test]
    fn classifier_indicator() {
        assert!(classifier_reward(&DemoSet::empty(3, 2), 3, 2)
            .unwrap()
            .values()
            .iter()
            .all(|&r| r == 0.0));
        let r = classifier_reward(&demo(&[(1, 0)], 3, 2), 3, 2).unwrap();
        assert_eq!(r.values().sum(), 1.0);
        assert_eq!(r.values()[[1, 0]], 1.0);
    }

    #[test]
    fn discriminator_is_half_on_matched_occupancies() {
        let d = array![[0.1, 0.2], [0.3, 0.4]];
        let (disc, r) = discriminator_reward(&d, &d, 1e-3);
        assert!(disc.iter().all(|&x| (x - 0.5).abs() < 1e-15));
        assert!(r.iter().all(|&x| x == 0.0));
    }
}
