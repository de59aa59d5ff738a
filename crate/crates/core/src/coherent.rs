//! The coherent reward of a fitted continuous policy, its refinement against
//! non-expert samples, and the one-dimensional contextual-bandit experiment.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::stationary::{
    clip_gradient, fit_bc, sample_feature_map, set_parameters_unchecked, Activation, ContinuousDemoSet, FitConfig,
    HetStatPolicy, DEFAULT_SIGMA_MIN, GRAD_CLIP,
};

/// Lower limit on `r` inside `exp(-r)` when weighting refinement gradients.
const EXP_FLOOR: f64 = -30.0;

/// `r - 1 + exp(-r)`: nonnegative, zero only at `r = 0`.
pub fn kl_penalty(r: f64) -> f64 {
    // expm1 keeps precision near zero, where the two terms nearly cancel.
    (-r).exp_m1() + r
}

/// `-0.5 log(pi sigma_min / 2)`, the Gaussian part of the reward bound.
pub fn gaussian_bound(sigma_min: f64) -> Result<f64> {
    if !(sigma_min > 0.0 && sigma_min.is_finite()) {
        return Err(invalid_arg(format!("sigma_min must be positive, got {sigma_min}")));
    }
    Ok(-0.5 * (PI * sigma_min / 2.0).ln())
}

/// Upper bound on the coherent reward at temperature `1 / d_a` against a
/// uniform prior: the Gaussian part plus the clipped tanh-Jacobian constant.
pub fn reward_upper_bound(policy: &HetStatPolicy, sigma_min: f64) -> Result<f64> {
    Ok(gaussian_bound(sigma_min)? + policy.clip_constant())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherentReward {
    pub policy: HetStatPolicy,
    pub alpha: f64,
    /// Log-density of the uniform prior on `[-1, 1]^d_a`.
    pub prior_log_density: f64,
    pub bound_offset: Option<f64>,
}

impl CoherentReward {
    pub fn new(policy: HetStatPolicy, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid_arg(format!("alpha must be positive, got {alpha}")));
        }
        let prior_log_density = -(policy.action_dim() as f64) * 2f64.ln();
        Ok(Self {
            policy,
            alpha,
            prior_log_density,
            bound_offset: None,
        })
    }

    /// Bound on the unshifted reward; the temperature-`1/d_a` bound scaled
    /// by `alpha d_a`.
    pub fn upper_bound(&self) -> Result<f64> {
        let d = self.policy.action_dim() as f64;
        Ok(self.alpha * d * reward_upper_bound(&self.policy, self.policy.sigma_min())?)
    }

    /// Shifts the reward down by its upper bound so it is never positive.
    pub fn with_bound_offset(mut self) -> Result<Self> {
        self.bound_offset = Some(self.upper_bound()?);
        Ok(self)
    }

    pub fn eval(&self, state: ArrayView1<f64>, action: ArrayView1<f64>) -> Result<f64> {
        let lp = self.policy.log_prob(state, action)?;
        Ok(self.alpha * (lp - self.prior_log_density) - self.bound_offset.unwrap_or(0.0))
    }

    pub fn eval_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        let lp = self.policy.log_prob_batch(states, actions)?;
        let shift = self.alpha * self.prior_log_density + self.bound_offset.unwrap_or(0.0);
        Ok(lp * self.alpha - shift)
    }
}

pub fn coherent_reward_eval(cr: &CoherentReward, state: ArrayView1<f64>, action: ArrayView1<f64>) -> Result<f64> {
    cr.eval(state, action)
}

/// Where refinement draws its non-expert `(s, a)` pairs from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonExpertSampler {
    /// Uniform over a box of states and `[-action_extent, action_extent]^d_a`.
    Uniform {
        state_low: Vec<f64>,
        state_high: Vec<f64>,
        action_extent: f64,
    },
    /// Returns the demonstration set itself, ignoring the batch size.
    Demos,
    /// No non-expert term: plain ascent on the demo reward.
    None,
}

impl NonExpertSampler {
    fn draw<R: Rng + ?Sized>(
        &self,
        demos: &ContinuousDemoSet,
        batch: usize,
        rng: &mut R,
    ) -> Result<Option<(Array2<f64>, Array2<f64>)>> {
        match self {
            NonExpertSampler::None => Ok(None),
            NonExpertSampler::Demos => Ok(Some((demos.states().clone(), demos.actions().clone()))),
            NonExpertSampler::Uniform {
                state_low,
                state_high,
                action_extent,
            } => {
                if state_low.len() != demos.state_dim() || state_high.len() != demos.state_dim() {
                    return Err(invalid_arg("sampler box does not match the state dimension"));
                }
                let states = Array2::from_shape_fn((batch, demos.state_dim()), |(_, j)| {
                    state_low[j] + (state_high[j] - state_low[j]) * rng.random::<f64>()
                });
                let actions = Array2::from_shape_fn((batch, demos.action_dim()), |_| {
                    action_extent * (2.0 * rng.random::<f64>() - 1.0)
                });
                Ok(Some((states, actions)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Non-expert samples per step; demos are always used in full.
    pub batch_size: usize,
    pub freeze_features: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            iterations: 100,
            batch_size: 256,
            freeze_features: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    /// Objective value before each step.
    pub objectives: Vec<f64>,
    /// Mean demo reward before each step.
    pub demo_terms: Vec<f64>,
    /// Euclidean norm of each parameter update.
    pub update_norms: Vec<f64>,
}

/// Gradient ascent on `E_D[r] - E_S[r - 1 + exp(-r)]` over every parameter
/// of the policy that defines `r`.
pub fn refine_reward<R: Rng + ?Sized>(
    policy: &HetStatPolicy,
    demos: &ContinuousDemoSet,
    sampler: &NonExpertSampler,
    alpha: f64,
    config: &RefineConfig,
    rng: &mut R,
) -> Result<(HetStatPolicy, RefineReport)> {
    if config.iterations == 0 {
        return Err(invalid_arg("refinement needs at least one iteration"));
    }
    if demos.is_empty() {
        return Err(invalid_arg("no demonstrations"));
    }
    if !(config.learning_rate > 0.0) || config.batch_size == 0 {
        return Err(invalid_arg("refinement needs a positive learning rate and batch size"));
    }
    let mut current = CoherentReward::new(policy.clone(), alpha)?;
    let n_weights = policy.feature_map().weights().len();
    let nd = demos.len() as f64;
    let demo_weights = Array1::from_elem(demos.len(), alpha / nd);
    let mut report = RefineReport::default();
    for iteration in 0..config.iterations {
        let (lp, mut grad) =
            current
                .policy
                .log_prob_grad(demos.states().view(), demos.actions().view(), demo_weights.view())?;
        let demo_term = (alpha * (lp - current.prior_log_density)).mean().unwrap_or(0.0);
        let mut objective = demo_term;
        if let Some((states, actions)) = sampler.draw(demos, config.batch_size, rng)? {
            let r = current.eval_batch(states.view(), actions.view())?;
            let nb = r.len() as f64;
            objective -= r.iter().map(|&x| kl_penalty(x.max(EXP_FLOOR))).sum::<f64>() / nb;
            // d/dr of -(r - 1 + e^-r) is e^-r - 1.
            let w = r.mapv(|x| alpha * ((-x.max(EXP_FLOOR)).exp() - 1.0) / nb);
            let (_, g) = current.policy.log_prob_grad(states.view(), actions.view(), w.view())?;
            grad += &g;
        }
        if !objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                iteration,
                reason: format!("non-finite refinement objective {objective}"),
            });
        }
        report.objectives.push(objective);
        report.demo_terms.push(demo_term);
        if config.freeze_features {
            grad.slice_mut(s![..n_weights]).fill(0.0);
        }
        clip_gradient(&mut grad, GRAD_CLIP);
        report.update_norms.push(config.learning_rate * grad.dot(&grad).sqrt());
        let mut params = current.policy.parameters();
        params.scaled_add(config.learning_rate, &grad);
        set_parameters_unchecked(&mut current.policy, params.view());
    }
    Ok((current.policy, report))
}

/// Noise-free demo action as a function of a scalar state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemoFunction {
    /// `a = slope * s + offset`.
    Linear { slope: f64, offset: f64 },
    /// `a = amplitude * sin(frequency * s)`.
    Sine { amplitude: f64, frequency: f64 },
}

impl DemoFunction {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            DemoFunction::Linear { slope, offset } => slope * s + offset,
            DemoFunction::Sine { amplitude, frequency } => amplitude * (frequency * s).sin(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BanditConfig {
    pub state_low: f64,
    pub state_high: f64,
    pub demo_low: f64,
    pub demo_high: f64,
    pub demo_function: DemoFunction,
    /// Standard deviation of Gaussian noise added in pre-tanh space.
    pub noise: f64,
    pub n_demos: usize,
    pub n_features: usize,
    pub lengthscale: f64,
    pub activation: Activation,
    /// Prior predictive variance in pre-tanh space, floor included.
    pub prior_variance: f64,
    pub sigma_min: f64,
    pub alpha: f64,
    pub fit: FitConfig,
    pub refine: Option<RefineConfig>,
    pub grid_states: usize,
    pub grid_actions: usize,
    /// Grid actions span `[-action_extent, action_extent]`.
    pub action_extent: f64,
    /// In-support grid cells farther than this from the demo action count as off-demo.
    pub off_demo_margin: f64,
    /// States at least this many lengthscales from the demo interval count as out of support.
    pub ood_lengthscales: f64,
    pub seed: u64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            state_low: -4.0,
            state_high: 4.0,
            demo_low: -1.0,
            demo_high: 1.0,
            demo_function: DemoFunction::Sine {
                amplitude: 0.6,
                frequency: 2.0,
            },
            noise: 0.0,
            n_demos: 100,
            n_features: 128,
            lengthscale: 0.5,
            activation: Activation::Sinusoid,
            prior_variance: 2.0 / PI,
            sigma_min: DEFAULT_SIGMA_MIN,
            alpha: 1.0,
            fit: FitConfig {
                lambda_kl: 1.0,
                learning_rate: 0.1,
                iterations: 2000,
                freeze_features: false,
            },
            refine: Some(RefineConfig::default()),
            grid_states: 161,
            grid_actions: 73,
            action_extent: 0.9,
            off_demo_margin: 0.25,
            ood_lengthscales: 3.0,
            seed: 0,
        }
    }
}

impl BanditConfig {
    /// A narrow-lengthscale variant whose fitted reward is far from stationary.
    pub fn stress() -> Self {
        Self {
            lengthscale: 0.15,
            ..Self::default()
        }
    }

    /// Noise-free linear demonstrations with a lightly regularized fit and no
    /// refinement. The default prior weight shrinks the mean toward zero near
    /// the edges of the demo interval.
    pub fn linear_ridge() -> Self {
        let base = Self::default();
        Self {
            demo_function: DemoFunction::Linear {
                slope: 0.5,
                offset: 0.1,
            },
            noise: 0.0,
            fit: FitConfig {
                lambda_kl: 0.01,
                learning_rate: 0.3,
                iterations: 3000,
                ..base.fit
            },
            refine: None,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.state_low,
            self.state_high,
            self.demo_low,
            self.demo_high,
            self.noise,
            self.lengthscale,
            self.prior_variance,
            self.sigma_min,
            self.alpha,
            self.action_extent,
            self.off_demo_margin,
            self.ood_lengthscales,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(invalid_arg("bandit config values must be finite"));
        }
        if !(self.state_low < self.state_high) || !(self.demo_low < self.demo_high) {
            return Err(invalid_arg("state and demo intervals must be nonempty"));
        }
        if self.demo_low < self.state_low || self.demo_high > self.state_high {
            return Err(invalid_arg("demo interval must lie inside the state range"));
        }
        if !(self.action_extent > 0.0 && self.action_extent < 1.0) {
            return Err(invalid_arg("action extent must lie in (0, 1)"));
        }
        if self.n_demos == 0 || self.n_features == 0 || self.grid_states < 2 || self.grid_actions < 2 {
            return Err(invalid_arg("demo, feature and grid counts are too small"));
        }
        if !(self.sigma_min > 0.0) || !(self.prior_variance > self.sigma_min) {
            return Err(invalid_arg("need 0 < sigma_min < prior_variance"));
        }
        if self.noise < 0.0 || self.alpha <= 0.0 || self.lengthscale <= 0.0 {
            return Err(invalid_arg("noise must be nonnegative, alpha and lengthscale positive"));
        }
        for s in [self.demo_low, self.demo_high] {
            if self.demo_function.eval(s).abs() >= 1.0 {
                return Err(invalid_arg("demo function leaves (-1, 1) on the demo interval"));
            }
        }
        Ok(())
    }

    fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// Demo states drawn uniformly on the demo interval.
    pub fn sample_demos(&self) -> Result<ContinuousDemoSet> {
        let mut rng = self.stream(0);
        let mut states = Array2::zeros((self.n_demos, 1));
        let mut actions = Array2::zeros((self.n_demos, 1));
        for i in 0..self.n_demos {
            let s = self.demo_low + (self.demo_high - self.demo_low) * rng.random::<f64>();
            let eps: f64 = StandardNormal.sample(&mut rng);
            states[[i, 0]] = s;
            actions[[i, 0]] = (self.demo_function.eval(s).atanh() + self.noise * eps).tanh();
        }
        ContinuousDemoSet::new(states, actions)
    }

    pub fn prior_policy(&self) -> Result<HetStatPolicy> {
        let map = sample_feature_map(
            1,
            self.n_features,
            self.lengthscale,
            self.activation,
            self.stream(1).random(),
        )?;
        HetStatPolicy::prior(map, 1, self.prior_variance - self.sigma_min, self.sigma_min)
    }

    pub fn grid_state_values(&self) -> Vec<f64> {
        linspace(self.state_low, self.state_high, self.grid_states)
    }

    pub fn grid_action_values(&self) -> Vec<f64> {
        linspace(-self.action_extent, self.action_extent, self.grid_actions)
    }

    pub fn uniform_sampler(&self) -> NonExpertSampler {
        NonExpertSampler::Uniform {
            state_low: vec![self.state_low],
            state_high: vec![self.state_high],
            action_extent: self.action_extent,
        }
    }

    pub fn in_support(&self, s: f64) -> bool {
        s >= self.demo_low && s <= self.demo_high
    }

    pub fn out_of_support(&self, s: f64) -> bool {
        let gap = (self.demo_low - s).max(s - self.demo_high);
        gap >= self.ood_lengthscales * self.lengthscale
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Reward on the `(s, a)` grid, state-major: row `i * n_actions + j` holds
/// state `i` and action `j`.
pub fn reward_grid(cr: &CoherentReward, states: &[f64], actions: &[f64]) -> Result<Array1<f64>> {
    let n = states.len() * actions.len();
    let s = Array2::from_shape_fn((n, 1), |(k, _)| states[k / actions.len()]);
    let a = Array2::from_shape_fn((n, 1), |(k, _)| actions[k % actions.len()]);
    cr.eval_batch(s.view(), a.view())
}

/// Definition-style sign statistics of one reward grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignStats {
    /// Share of in-support states whose reward at the demo action is positive.
    pub demo_positive: f64,
    /// Share of in-support off-demo cells with negative reward.
    pub off_demo_negative: f64,
    pub in_support_mean_abs: f64,
    pub out_of_support_mean_abs: f64,
    /// `out_of_support_mean_abs / in_support_mean_abs`.
    pub ood_ratio: f64,
    /// Largest `|argmax_a r(s, .) - demo action|` over in-support states.
    pub max_argmax_error: f64,
    pub grid_max: f64,
}

pub fn sign_stats(cr: &CoherentReward, config: &BanditConfig, grid: &Array1<f64>) -> Result<SignStats> {
    let states = config.grid_state_values();
    let actions = config.grid_action_values();
    let na = actions.len();
    let (mut demo_pos, mut n_demo) = (0usize, 0usize);
    let (mut off_neg, mut n_off) = (0usize, 0usize);
    let (mut in_abs, mut n_in) = (0.0, 0usize);
    let (mut out_abs, mut n_out) = (0.0, 0usize);
    let mut argmax_err: f64 = 0.0;
    for (i, &s) in states.iter().enumerate() {
        let row = grid.slice(s![i * na..(i + 1) * na]);
        if config.in_support(s) {
            let target = config.demo_function.eval(s);
            let r = cr.eval(ArrayView1::from(&[s]), ArrayView1::from(&[target]))?;
            n_demo += 1;
            demo_pos += usize::from(r > 0.0);
            for (j, &a) in actions.iter().enumerate() {
                if (a - target).abs() > config.off_demo_margin {
                    n_off += 1;
                    off_neg += usize::from(row[j] < 0.0);
                }
            }
            in_abs += row.iter().map(|x| x.abs()).sum::<f64>();
            n_in += na;
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (j, &x)| if x > acc.1 { (j, x) } else { acc },
                )
                .0;
            argmax_err = argmax_err.max((actions[best] - target).abs());
        } else if config.out_of_support(s) {
            out_abs += row.iter().map(|x| x.abs()).sum::<f64>();
            n_out += na;
        }
    }
    let ratio = |a: f64, b: usize| if b == 0 { f64::NAN } else { a / b as f64 };
    let in_mean = ratio(in_abs, n_in);
    let out_mean = ratio(out_abs, n_out);
    Ok(SignStats {
        demo_positive: ratio(demo_pos as f64, n_demo),
        off_demo_negative: ratio(off_neg as f64, n_off),
        in_support_mean_abs: in_mean,
        out_of_support_mean_abs: out_mean,
        ood_ratio: out_mean / in_mean,
        max_argmax_error: argmax_err,
        grid_max: grid.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditSummary {
    pub pre: SignStats,
    pub post: SignStats,
    pub upper_bound: f64,
    pub clip_constant: f64,
    pub fit_loss: f64,
    /// Share of demo pairs with positive reward before and after refinement.
    pub demo_pairs_positive_pre: f64,
    pub demo_pairs_positive_post: f64,
    /// Mean `|r|` over uniform `(s, a)` draws from the grid box.
    pub uniform_mean_abs_pre: f64,
    pub uniform_mean_abs_post: f64,
    pub refined: bool,
}

#[derive(Clone, Debug)]
pub struct BanditArtifact {
    pub config: BanditConfig,
    pub demos: ContinuousDemoSet,
    pub fitted: HetStatPolicy,
    pub refined: HetStatPolicy,
    pub grid_states: Vec<f64>,
    pub grid_actions: Vec<f64>,
    pub reward_pre: Array1<f64>,
    pub reward_post: Array1<f64>,
    pub refine_report: Option<RefineReport>,
    pub summary: BanditSummary,
}

pub const GRID_CSV_HEADER: &str = "s,a,reward_pre,reward_post";

impl BanditArtifact {
    pub fn grid_csv(&self) -> String {
        let mut out = String::from(GRID_CSV_HEADER);
        out.push('\n');
        let na = self.grid_actions.len();
        for (k, (pre, post)) in self.reward_pre.iter().zip(&self.reward_post).enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.grid_states[k / na],
                self.grid_actions[k % na],
                pre,
                post
            );
        }
        out
    }

    /// Mean and standard deviation of the pre-tanh predictive on the state
    /// grid for both policies: `s,mean_pre,std_pre,mean_post,std_post`.
    pub fn moments_csv(&self) -> Result<String> {
        let mut out = String::from("s,mean_pre,std_pre,mean_post,std_post\n");
        for &s in &self.grid_states {
            let st = [s];
            let (m0, v0) = self.fitted.predictive(ArrayView1::from(&st))?[0];
            let (m1, v1) = self.refined.predictive(ArrayView1::from(&st))?[0];
            let _ = writeln!(out, "{},{},{},{},{}", s, m0, v0.sqrt(), m1, v1.sqrt());
        }
        Ok(out)
    }
}

fn positive_share(cr: &CoherentReward, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<f64> {
    let r = cr.eval_batch(states, actions)?;
    Ok(r.iter().filter(|&&x| x > 0.0).count() as f64 / r.len().max(1) as f64)
}

fn uniform_mean_abs(cr: &CoherentReward, config: &BanditConfig) -> Result<f64> {
    let mut rng = config.stream(3);
    let n = 4096;
    let s = Array2::from_shape_fn((n, 1), |_| {
        config.state_low + (config.state_high - config.state_low) * rng.random::<f64>()
    });
    let a = Array2::from_shape_fn((n, 1), |_| config.action_extent * (2.0 * rng.random::<f64>() - 1.0));
    Ok(cr
        .eval_batch(s.view(), a.view())?
        .mapv(f64::abs)
        .mean()
        .unwrap_or(f64::NAN))
}

/// Fits the policy on synthetic demos, optionally refines the reward, and
/// evaluates both rewards on the `(s, a)` grid.
pub fn run_bandit_experiment(config: &BanditConfig) -> Result<BanditArtifact> {
    config.validate()?;
    let demos = config.sample_demos()?;
    let prior = config.prior_policy()?;
    let (fitted, fit_report) = fit_bc(&prior, &demos, &config.fit)?;
    let (refined, refine_report) = match &config.refine {
        Some(rc) => {
            let mut rng = config.stream(2);
            let (p, rep) = refine_reward(&fitted, &demos, &config.uniform_sampler(), config.alpha, rc, &mut rng)?;
            (p, Some(rep))
        }
        None => (fitted.clone(), None),
    };
    let cr_pre = CoherentReward::new(fitted.clone(), config.alpha)?;
    let cr_post = CoherentReward::new(refined.clone(), config.alpha)?;
    let grid_states = config.grid_state_values();
    let grid_actions = config.grid_action_values();
    let reward_pre = reward_grid(&cr_pre, &grid_states, &grid_actions)?;
    let reward_post = if config.refine.is_some() {
        reward_grid(&cr_post, &grid_states, &grid_actions)?
    } else {
        reward_pre.clone()
    };
    let summary = BanditSummary {
        pre: sign_stats(&cr_pre, config, &reward_pre)?,
        post: sign_stats(&cr_post, config, &reward_post)?,
        upper_bound: cr_pre.upper_bound()?,
        clip_constant: fitted.clip_constant(),
        fit_loss: fit_report.losses.last().copied().unwrap_or(f64::NAN),
        demo_pairs_positive_pre: positive_share(&cr_pre, demos.states().view(), demos.actions().view())?,
        demo_pairs_positive_post: positive_share(&cr_post, demos.states().view(), demos.actions().view())?,
        uniform_mean_abs_pre: uniform_mean_abs(&cr_pre, config)?,
        uniform_mean_abs_post: uniform_mean_abs(&cr_post, config)?,
        refined: config.refine.is_some(),
    };
    Ok(BanditArtifact {
        config: config.clone(),
        demos,
        fitted,
        refined,
        grid_states,
        grid_actions,
        reward_pre,
        reward_post,
        refine_report,
        summary,
    })
}
