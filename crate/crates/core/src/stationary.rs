//! Squashed-Gaussian policies over periodic random features.
//!
//! A [`HetStatPolicy`] maps a state through a [`PeriodicFeatureMap`] and one
//! Gaussian weight head per action dimension. Before any data is seen the
//! implied process over pre-tanh actions is (approximately) stationary, so
//! the policy looks the same everywhere; after fitting it only departs from
//! the prior near the data.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};

pub const DEFAULT_ACTION_CLIP: f64 = 1.0 - 1e-6;
pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;
pub const GRAD_CLIP: f64 = 10.0;

const TRIANGLE_SCALE: f64 = 1.224_744_871_391_589; // sqrt(3/2)
const PERIODIC_RELU_SCALE: f64 = 0.866_025_403_784_438_6; // sqrt(3/4)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sinusoid,
    Triangular,
    PeriodicRelu,
}

impl Activation {
    /// Value and derivative. Every activation has period `2 pi`, zero mean
    /// and mean square 1/2 over a period.
    pub fn eval(self, u: f64) -> (f64, f64) {
        match self {
            Activation::Sinusoid => (u.cos(), -u.sin()),
            Activation::Triangular => {
                let (t, d) = triangle(u);
                (TRIANGLE_SCALE * t, TRIANGLE_SCALE * d)
            }
            Activation::PeriodicRelu => {
                let (t0, d0) = triangle(u);
                let (t1, d1) = triangle(u + 0.5 * PI);
                (PERIODIC_RELU_SCALE * (t0 + t1), PERIODIC_RELU_SCALE * (d0 + d1))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sinusoid => "sinusoid",
            Activation::Triangular => "triangular",
            Activation::PeriodicRelu => "periodic_relu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sinusoid" => Ok(Activation::Sinusoid),
            "triangular" => Ok(Activation::Triangular),
            "periodic_relu" => Ok(Activation::PeriodicRelu),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

/// Unit triangle wave in phase with `cos`: 1 at `u = 0`, -1 at `u = pi`.
fn triangle(u: f64) -> (f64, f64) {
    let t = (u / (2.0 * PI)).rem_euclid(1.0);
    let slope = 4.0 / (2.0 * PI);
    if t < 0.5 {
        (1.0 - 4.0 * t, -slope)
    } else {
        (4.0 * t - 3.0, slope)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicFeatureMap {
    /// Spectral weights, `n_features x input_dim`.
    weights: Array2<f64>,
    phases: Array1<f64>,
    activation: Activation,
    amplitude: f64,
    lengthscale: f64,
}

/// Draws a feature map. Rows come in pairs sharing one spectral weight with
/// phases `b` and `b + pi/2`; for the sinusoid this makes the prior
/// covariance exactly shift invariant.
pub fn sample_feature_map(
    input_dim: usize,
    n_features: usize,
    lengthscale: f64,
    activation: Activation,
    seed: u64,
) -> Result<PeriodicFeatureMap> {
    if input_dim == 0 || n_features == 0 {
        return Err(invalid_arg(
            "feature map needs a positive input dimension and feature count",
        ));
    }
    if !(lengthscale > 0.0 && lengthscale.is_finite()) {
        return Err(invalid_arg(format!("lengthscale must be positive, got {lengthscale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spectral = Normal::new(0.0, 1.0 / lengthscale).map_err(|e| Error::Internal(e.to_string()))?;
    let mut weights = Array2::zeros((n_features, input_dim));
    let mut phases = Array1::zeros(n_features);
    for j in (0..n_features).step_by(2) {
        let row: Vec<f64> = (0..input_dim).map(|_| spectral.sample(&mut rng)).collect();
        let phase = rng.random::<f64>() * 2.0 * PI;
        for (k, jj) in (j..(j + 2).min(n_features)).enumerate() {
            weights.row_mut(jj).assign(&ArrayView1::from(&row));
            phases[jj] = phase + 0.5 * PI * k as f64;
        }
    }
    Ok(PeriodicFeatureMap {
        weights,
        phases,
        activation,
        amplitude: 1.0,
        lengthscale,
    })
}

impl PeriodicFeatureMap {
    pub fn with_amplitude(mut self, amplitude: f64) -> Result<Self> {
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            return Err(invalid_arg(format!("amplitude must be positive, got {amplitude}")));
        }
        self.amplitude = amplitude;
        Ok(self)
    }

    pub fn n_features(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn phases(&self) -> &Array1<f64> {
        &self.phases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    fn scale(&self) -> f64 {
        self.amplitude * (2.0 / self.n_features() as f64).sqrt()
    }

    pub fn features(&self, state: ArrayView1<f64>) -> Result<Array1<f64>> {
        if state.len() != self.input_dim() {
            return Err(invalid_arg(format!(
                "state has dimension {}, feature map expects {}",
                state.len(),
                self.input_dim()
            )));
        }
        let c = self.scale();
        let u = self.weights.dot(&state) + &self.phases;
        Ok(u.mapv(|x| c * self.activation.eval(x).0))
    }

    /// Features and their derivatives with respect to the pre-activation,
    /// one row per state.
    pub fn features_batch(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if states.ncols() != self.input_dim() {
            return Err(invalid_arg(format!(
                "states have dimension {}, feature map expects {}",
                states.ncols(),
                self.input_dim()
            )));
        }
        let c = self.scale();
        let u = states.dot(&self.weights.t()) + &self.phases;
        let mut phi = Array2::zeros(u.dim());
        let mut dphi = Array2::zeros(u.dim());
        Zip::from(&mut phi).and(&mut dphi).and(&u).for_each(|p, d, &x| {
            let (f, df) = self.activation.eval(x);
            *p = c * f;
            *d = c * df;
        });
        Ok((phi, dphi))
    }

    /// Monte Carlo estimate of the prior covariance `phi(x) . phi(y)` under
    /// unit-variance weights.
    pub fn covariance(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
        Ok(self.features(x)?.dot(&self.features(y)?))
    }
}

/// Gaussian weights for one action dimension, `w ~ N(mean, L L^T)`, with an
/// isotropic zero-mean prior of variance `prior_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    mean: Array1<f64>,
    /// Lower-triangular factor with positive diagonal.
    chol: Array2<f64>,
    prior_scale: f64,
}

impl GaussianHead {
    pub fn prior(n_features: usize, prior_scale: f64) -> Result<Self> {
        if !(prior_scale > 0.0 && prior_scale.is_finite()) {
            return Err(invalid_arg(format!("prior scale must be positive, got {prior_scale}")));
        }
        Ok(Self {
            mean: Array1::zeros(n_features),
            chol: Array2::eye(n_features) * prior_scale.sqrt(),
            prior_scale,
        })
    }

    pub fn new(mean: Array1<f64>, chol: Array2<f64>, prior_scale: f64) -> Result<Self> {
        let n = mean.len();
        if chol.dim() != (n, n) {
            return Err(invalid_arg("head factor must be square and match the mean"));
        }
        let head = Self {
            mean,
            chol,
            prior_scale,
        };
        head.validate()?;
        Ok(head)
    }

    fn validate(&self) -> Result<()> {
        if !(self.prior_scale > 0.0 && self.prior_scale.is_finite()) {
            return Err(invalid_arg("prior scale must be positive"));
        }
        if self.mean.iter().any(|x| !x.is_finite()) || self.chol.iter().any(|x| !x.is_finite()) {
            return Err(invalid_arg("head parameters must be finite"));
        }
        for i in 0..self.chol.nrows() {
            if self.chol[[i, i]] <= 0.0 {
                return Err(invalid_arg("head factor needs a positive diagonal"));
            }
            if self.chol.row(i).iter().skip(i + 1).any(|&x| x != 0.0) {
                return Err(invalid_arg("head factor must be lower triangular"));
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn chol(&self) -> &Array2<f64> {
        &self.chol
    }

    pub fn prior_scale(&self) -> f64 {
        self.prior_scale
    }

    pub fn covariance(&self) -> Array2<f64> {
        self.chol.dot(&self.chol.t())
    }

    /// `KL(N(mean, L L^T) || N(0, prior_scale I))`.
    pub fn kl_to_prior(&self) -> f64 {
        let n = self.mean.len() as f64;
        let s = self.prior_scale;
        let frob: f64 = self.chol.iter().map(|x| x * x).sum();
        let log_det: f64 = (0..self.chol.nrows())
            .map(|i| self.chol[[i, i]].abs().ln())
            .sum::<f64>()
            * 2.0;
        0.5 * ((frob + self.mean.dot(&self.mean)) / s - n + n * s.ln() - log_det)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HetStatPolicy {
    feature_map: PeriodicFeatureMap,
    heads: Vec<GaussianHead>,
    sigma_min: f64,
    action_clip: f64,
}

/// Forward quantities for a batch of states.
struct Forward {
    phi: Array2<f64>,
    dphi: Array2<f64>,
    /// `Phi L_i` per head.
    proj: Vec<Array2<f64>>,
    means: Array2<f64>,
    vars: Array2<f64>,
}

impl HetStatPolicy {
    /// Policy whose heads all sit at their prior.
    pub fn prior(feature_map: PeriodicFeatureMap, action_dim: usize, prior_scale: f64, sigma_min: f64) -> Result<Self> {
        if action_dim == 0 {
            return Err(invalid_arg("policy needs at least one action dimension"));
        }
        let head = GaussianHead::prior(feature_map.n_features(), prior_scale)?;
        Self::new(feature_map, vec![head; action_dim], sigma_min, DEFAULT_ACTION_CLIP)
    }

    pub fn new(
        feature_map: PeriodicFeatureMap,
        heads: Vec<GaussianHead>,
        sigma_min: f64,
        action_clip: f64,
    ) -> Result<Self> {
        let policy = Self {
            feature_map,
            heads,
            sigma_min,
            action_clip,
        };
        policy.validate()?;
        Ok(policy)
    }

    fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(invalid_arg("policy needs at least one head"));
        }
        if !(self.sigma_min >= 0.0 && self.sigma_min.is_finite()) {
            return Err(invalid_arg(format!(
                "sigma_min must be nonnegative, got {}",
                self.sigma_min
            )));
        }
        if !(self.action_clip > 0.0 && self.action_clip < 1.0) {
            return Err(invalid_arg(format!(
                "action clip must lie in (0, 1), got {}",
                self.action_clip
            )));
        }
        let n = self.feature_map.n_features();
        if self.feature_map.phases.len() != n {
            return Err(invalid_arg("feature map phases do not match its weights"));
        }
        if self.feature_map.weights.iter().any(|x| !x.is_finite()) {
            return Err(invalid_arg("feature weights must be finite"));
        }
        for head in &self.heads {
            if head.mean.len() != n {
                return Err(invalid_arg("head size does not match the feature count"));
            }
            head.validate()?;
        }
        Ok(())
    }

    pub fn with_action_clip(mut self, action_clip: f64) -> Result<Self> {
        self.action_clip = action_clip;
        self.validate()?;
        Ok(self)
    }

    pub fn feature_map(&self) -> &PeriodicFeatureMap {
        &self.feature_map
    }

    pub fn heads(&self) -> &[GaussianHead] {
        &self.heads
    }

    pub fn action_dim(&self) -> usize {
        self.heads.len()
    }

    pub fn state_dim(&self) -> usize {
        self.feature_map.input_dim()
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn action_clip(&self) -> f64 {
        self.action_clip
    }

    /// Largest value of the per-dimension tanh Jacobian term `-log(1 - a^2)`
    /// after clipping.
    pub fn clip_constant(&self) -> f64 {
        -(1.0 - self.action_clip * self.action_clip).ln()
    }

    fn check_state(&self, state: ArrayView1<f64>) -> Result<()> {
        if state.len() != self.state_dim() {
            return Err(invalid_arg(format!(
                "state has dimension {}, policy expects {}",
                state.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<()> {
        if states.nrows() != actions.nrows() {
            return Err(invalid_arg("states and actions differ in length"));
        }
        if states.ncols() != self.state_dim() || actions.ncols() != self.action_dim() {
            return Err(invalid_arg(format!(
                "batch is {}-d states / {}-d actions, policy expects {} / {}",
                states.ncols(),
                actions.ncols(),
                self.state_dim(),
                self.action_dim()
            )));
        }
        Ok(())
    }

    /// Pre-tanh `(mean, variance)` for each action dimension.
    pub fn predictive(&self, state: ArrayView1<f64>) -> Result<Vec<(f64, f64)>> {
        self.check_state(state)?;
        let phi = self.feature_map.features(state)?;
        Ok(self
            .heads
            .iter()
            .map(|h| {
                let proj = h.chol.t().dot(&phi);
                (h.mean.dot(&phi), proj.dot(&proj) + self.sigma_min)
            })
            .collect())
    }

    fn forward(&self, states: ArrayView2<f64>) -> Result<Forward> {
        let (phi, dphi) = self.feature_map.features_batch(states)?;
        let n = states.nrows();
        let mut means = Array2::zeros((n, self.action_dim()));
        let mut vars = Array2::zeros((n, self.action_dim()));
        let mut proj = Vec::with_capacity(self.action_dim());
        for (i, h) in self.heads.iter().enumerate() {
            means.column_mut(i).assign(&phi.dot(&h.mean));
            let p = phi.dot(&h.chol);
            vars.column_mut(i)
                .assign(&(p.map_axis(Axis(1), |r| r.dot(&r)) + self.sigma_min));
            proj.push(p);
        }
        Ok(Forward {
            phi,
            dphi,
            proj,
            means,
            vars,
        })
    }

    /// Pre-tanh regression targets `atanh(clip(a))`.
    pub fn targets(&self, actions: ArrayView2<f64>) -> Array2<f64> {
        let c = self.action_clip;
        actions.mapv(|a| a.clamp(-c, c).atanh())
    }

    fn jacobian_terms(&self, actions: ArrayView2<f64>) -> Array1<f64> {
        let c = self.action_clip;
        actions.map_axis(Axis(1), |row| {
            row.iter()
                .map(|&a| {
                    let a = a.clamp(-c, c);
                    -(1.0 - a * a).ln()
                })
                .sum()
        })
    }

    pub fn log_prob(&self, state: ArrayView1<f64>, action: ArrayView1<f64>) -> Result<f64> {
        self.check_state(state)?;
        let states = state.insert_axis(Axis(0));
        let actions = action.insert_axis(Axis(0));
        Ok(self.log_prob_batch(states, actions)?[0])
    }

    /// Squashed-Gaussian log-density of each `(state, action)` row.
    pub fn log_prob_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_batch(states, actions)?;
        let fwd = self.forward(states)?;
        let z = self.targets(actions);
        let lp = self.gaussian_log_prob(&fwd, &z) + self.jacobian_terms(actions);
        if let Some(i) = lp.iter().position(|x| !x.is_finite()) {
            return Err(Error::Internal(format!("non-finite log-density at row {i}")));
        }
        Ok(lp)
    }

    fn gaussian_log_prob(&self, fwd: &Forward, z: &Array2<f64>) -> Array1<f64> {
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let mut out = Array1::zeros(z.nrows());
        Zip::from(&mut out)
            .and(z.rows())
            .and(fwd.means.rows())
            .and(fwd.vars.rows())
            .for_each(|o, z, m, v| {
                *o = z
                    .iter()
                    .zip(m)
                    .zip(v)
                    .map(|((z, m), v)| -half_log_2pi - 0.5 * v.ln() - (z - m).powi(2) / (2.0 * v))
                    .sum();
            });
        out
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state: ArrayView1<f64>, rng: &mut R) -> Result<Array1<f64>> {
        let pred = self.predictive(state)?;
        Ok(pred
            .into_iter()
            .map(|(m, v)| {
                let eps: f64 = StandardNormal.sample(rng);
                (m + v.sqrt() * eps).tanh()
            })
            .collect())
    }

    pub fn n_parameters(&self) -> usize {
        let n = self.feature_map.n_features();
        self.feature_map.weights.len() + self.action_dim() * (n + n * (n + 1) / 2)
    }

    /// Trainable parameters, flattened: spectral weights (row-major), then
    /// per head its mean, the log of the factor diagonal, and the strictly
    /// lower part of the factor with each column divided by its diagonal
    /// (row-major). Writing `L = M diag(exp(l))` with unit-diagonal `M` keeps
    /// the diagonal positive and the variance gradient bounded in `l`.
    pub fn parameters(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.n_parameters());
        out.extend(self.feature_map.weights.iter());
        for h in &self.heads {
            let n = h.chol.nrows();
            out.extend(h.mean.iter());
            out.extend((0..n).map(|j| h.chol[[j, j]].ln()));
            for i in 0..n {
                out.extend((0..i).map(|j| h.chol[[i, j]] / h.chol[[j, j]]));
            }
        }
        Array1::from(out)
    }

    /// Inverse of [`Self::parameters`]. Rejects non-finite values and
    /// factors whose diagonal overflows or underflows.
    pub fn set_parameters(&mut self, params: ArrayView1<f64>) -> Result<()> {
        if params.len() != self.n_parameters() {
            return Err(invalid_arg(format!(
                "expected {} parameters, got {}",
                self.n_parameters(),
                params.len()
            )));
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(invalid_arg("parameters must be finite"));
        }
        let mut next = self.clone();
        set_parameters_unchecked(&mut next, params);
        for h in &next.heads {
            h.validate()?;
        }
        *self = next;
        Ok(())
    }

    /// Gradient of `sum_rows sum_i gm[r,i] mean_i(s_r) + gv[r,i] var_i(s_r)`
    /// with respect to [`Self::parameters`]. With `features_through_var` off
    /// the spectral weights only receive the mean's share.
    fn backprop(
        &self,
        states: ArrayView2<f64>,
        fwd: &Forward,
        gm: &Array2<f64>,
        gv: &Array2<f64>,
        features_through_var: bool,
    ) -> Array1<f64> {
        let mut g_phi = Array2::<f64>::zeros(fwd.phi.dim());
        let mut head_grads = Vec::with_capacity(self.action_dim());
        for (i, h) in self.heads.iter().enumerate() {
            let gm_i = gm.column(i);
            let gv_i = gv.column(i);
            let g_mean = fwd.phi.t().dot(&gm_i);
            // d var / d L = 2 phi (L^T phi)^T, summed with weights gv.
            let weighted = &fwd.proj[i] * &gv_i.insert_axis(Axis(1));
            let g_chol = fwd.phi.t().dot(&weighted) * 2.0;
            g_phi += &(gm_i.insert_axis(Axis(1)).dot(&h.mean.view().insert_axis(Axis(0))));
            if features_through_var {
                g_phi += &(weighted.dot(&h.chol.t()) * 2.0);
            }
            head_grads.push((g_mean, g_chol));
        }
        let g_pre = g_phi * &fwd.dphi;
        let g_weights = g_pre.t().dot(&states);
        let mut out = Vec::with_capacity(self.n_parameters());
        out.extend(g_weights.iter());
        for ((g_mean, g_chol), h) in head_grads.into_iter().zip(&self.heads) {
            out.extend(g_mean.iter());
            push_factor_grad(&mut out, &g_chol, &h.chol);
        }
        debug_assert_eq!(out.len(), self.n_parameters());
        Array1::from(out)
    }

    /// Gradient of `sum_rows weights[r] * log_prob(s_r, a_r)` with respect to
    /// every parameter, together with the per-row log-densities.
    pub fn log_prob_grad(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        weights: ArrayView1<f64>,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        self.check_batch(states, actions)?;
        if weights.len() != states.nrows() {
            return Err(invalid_arg("one weight per row is required"));
        }
        let fwd = self.forward(states)?;
        let z = self.targets(actions);
        let lp = self.gaussian_log_prob(&fwd, &z) + self.jacobian_terms(actions);
        let resid = &z - &fwd.means;
        let w = weights.insert_axis(Axis(1));
        let gm = &resid / &fwd.vars * w;
        let gv = (resid.mapv(|r| r * r) / fwd.vars.mapv(|v| 2.0 * v * v) - fwd.vars.mapv(|v| 0.5 / v)) * w;
        Ok((lp, self.backprop(states, &fwd, &gm, &gv, true)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let policy: Self = serde_json::from_str(text)?;
        policy.validate()?;
        Ok(policy)
    }
}

/// Continuous `(state, action)` demonstrations, one pair per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousDemoSet {
    states: Array2<f64>,
    actions: Array2<f64>,
}

impl ContinuousDemoSet {
    pub fn new(states: Array2<f64>, actions: Array2<f64>) -> Result<Self> {
        if states.nrows() != actions.nrows() {
            return Err(invalid_arg("states and actions differ in length"));
        }
        if states.ncols() == 0 || actions.ncols() == 0 {
            return Err(invalid_arg("states and actions need at least one dimension"));
        }
        if states.iter().any(|x| !x.is_finite()) {
            return Err(invalid_arg("states must be finite"));
        }
        if actions.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(invalid_arg("actions must lie in [-1, 1]"));
        }
        Ok(Self { states, actions })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn states(&self) -> &Array2<f64> {
        &self.states
    }

    pub fn actions(&self) -> &Array2<f64> {
        &self.actions
    }

    pub fn header(&self) -> String {
        let s = (0..self.state_dim()).map(|i| format!("s_{i}"));
        let a = (0..self.action_dim()).map(|i| format!("a_{i}"));
        s.chain(a).collect::<Vec<_>>().join(",")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut text = self.header();
        text.push('\n');
        for (s, a) in self.states.rows().into_iter().zip(self.actions.rows()) {
            let fields: Vec<String> = s.iter().chain(a.iter()).map(|x| x.to_string()).collect();
            let _ = writeln!(text, "{}", fields.join(","));
        }
        out.write_all(text.as_bytes())?;
        Ok(())
    }

    /// Reads a CSV whose header names the columns `s_0.., a_0..`.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let names: Vec<&str> = header.trim().split(',').map(str::trim).collect();
        let ds = names.iter().take_while(|n| n.starts_with("s_")).count();
        let da = names.len() - ds;
        let expected: Vec<String> = (0..ds)
            .map(|i| format!("s_{i}"))
            .chain((0..da).map(|i| format!("a_{i}")))
            .collect();
        if ds == 0 || da == 0 || names != expected {
            return Err(Error::Parse(format!("expected header `s_0..,a_0..`, got `{header}`")));
        }
        let mut values = Vec::new();
        let mut rows = 0;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
            if fields.len() != ds + da {
                return Err(Error::Parse(format!(
                    "line {}: expected {} fields",
                    lineno + 2,
                    ds + da
                )));
            }
            values.extend(fields);
            rows += 1;
        }
        let table = Array2::from_shape_vec((rows, ds + da), values).map_err(|e| Error::Internal(e.to_string()))?;
        Self::new(
            table.slice(s![.., ..ds]).to_owned(),
            table.slice(s![.., ds..]).to_owned(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub lambda_kl: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Keep the spectral weights at their sampled values.
    pub freeze_features: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_kl: 1.0,
            learning_rate: 0.05,
            iterations: 2000,
            freeze_features: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub losses: Vec<f64>,
}

/// The fitting loss with its stop-gradients made explicit: the NLL term uses
/// the mean of `anchor` and the variance is computed from the features of
/// `anchor`, while the squared error and the KL use `policy`. At
/// `policy == anchor` this is the fitting loss and its gradient is the one
/// [`bc_loss_grad`] returns.
pub fn bc_loss(
    policy: &HetStatPolicy,
    anchor: &HetStatPolicy,
    demos: &ContinuousDemoSet,
    lambda_kl: f64,
) -> Result<f64> {
    policy.check_batch(demos.states.view(), demos.actions.view())?;
    let n = demos.len();
    if n == 0 {
        return Err(invalid_arg("no demonstrations"));
    }
    let z = policy.targets(demos.actions.view());
    let fwd = policy.forward(demos.states.view())?;
    let anchor_fwd = anchor.forward(demos.states.view())?;
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let mut total = 0.0;
    for (i, h) in policy.heads.iter().enumerate() {
        let var = anchor_fwd
            .phi
            .dot(&h.chol)
            .map_axis(Axis(1), |r| r.dot(&r) + policy.sigma_min);
        for r in 0..n {
            let zr = z[[r, i]];
            let mse = (zr - fwd.means[[r, i]]).powi(2);
            let nll = half_log_2pi + 0.5 * var[r].ln() + (zr - anchor_fwd.means[[r, i]]).powi(2) / (2.0 * var[r]);
            total += mse + nll;
        }
        total += lambda_kl * h.kl_to_prior();
    }
    Ok(total / n as f64)
}

/// Fitting loss and its gradient with respect to [`HetStatPolicy::parameters`].
pub fn bc_loss_grad(policy: &HetStatPolicy, demos: &ContinuousDemoSet, lambda_kl: f64) -> Result<(f64, Array1<f64>)> {
    let (data_loss, mut grad) = bc_data_grad(policy, demos)?;
    let n = demos.len() as f64;
    let kl: f64 = policy.heads.iter().map(GaussianHead::kl_to_prior).sum();
    let offset = policy.feature_map.weights.len();
    let nf = policy.feature_map.n_features();
    let head_len = nf + nf * (nf + 1) / 2;
    for (i, h) in policy.heads.iter().enumerate() {
        let base = offset + i * head_len;
        let s = h.prior_scale;
        for j in 0..nf {
            grad[base + j] += lambda_kl * h.mean[j] / (s * n);
        }
        // The log-determinant only depends on the log-diagonal, where it
        // contributes -1 per entry.
        let mut g_kl = Vec::with_capacity(nf * (nf + 1) / 2);
        push_factor_grad(&mut g_kl, &(&h.chol / s), &h.chol);
        for (j, g) in g_kl.iter_mut().enumerate() {
            if j < nf {
                *g -= 1.0;
            }
            grad[base + nf + j] += lambda_kl * *g / n;
        }
    }
    Ok((data_loss + lambda_kl * kl / n, grad))
}

/// Data term of the fitting loss (mean over pairs) and its gradient.
fn bc_data_grad(policy: &HetStatPolicy, demos: &ContinuousDemoSet) -> Result<(f64, Array1<f64>)> {
    policy.check_batch(demos.states.view(), demos.actions.view())?;
    if demos.is_empty() {
        return Err(invalid_arg("no demonstrations"));
    }
    let n = demos.len() as f64;
    let fwd = policy.forward(demos.states.view())?;
    let z = policy.targets(demos.actions.view());
    let resid = &z - &fwd.means;
    let sq = resid.mapv(|r| r * r);
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let nll = fwd.vars.mapv(|v| half_log_2pi + 0.5 * v.ln()) + &sq / &fwd.vars.mapv(|v| 2.0 * v);
    let loss = (sq.sum() + nll.sum()) / n;
    let gm = resid.mapv(|r| -2.0 * r / n);
    let gv = (fwd.vars.mapv(|v| 0.5 / v) - &sq / &fwd.vars.mapv(|v| 2.0 * v * v)) / n;
    Ok((loss, policy.backprop(demos.states.view(), &fwd, &gm, &gv, false)))
}

/// Rescales `g` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_gradient(g: &mut Array1<f64>, max_norm: f64) -> f64 {
    let norm = g.dot(g).sqrt();
    if norm > max_norm {
        *g *= max_norm / norm;
    }
    norm
}

/// Proximal step of the KL term for one head in the `(mean, log-diagonal,
/// unit factor)` coordinates, taken block by block: the mean and the strictly
/// lower entries shrink in closed form, then each log-diagonal entry solves a
/// scalar monotone equation by Newton's method.
fn kl_prox(head: &mut GaussianHead, step: f64) {
    let s = head.prior_scale;
    head.mean /= 1.0 + step / s;
    let n = head.chol.nrows();
    for j in 0..n {
        let d = head.chol[[j, j]];
        let shrink = 1.0 + step * d * d / s;
        let mut c = 1.0;
        for i in j + 1..n {
            let m = head.chol[[i, j]] / d / shrink;
            head.chol[[i, j]] = m;
            c += m * m;
        }
        // Root of g(l) = l - y + step * (c exp(2l) / s - 1), convex and
        // increasing, approached from the right.
        let y = d.ln();
        let pivot = 0.5 * (s / c).ln();
        let mut l = pivot + 0.5 * (1.0 + (y - pivot).max(0.0) / step).ln();
        for _ in 0..100 {
            let e = step * c * (2.0 * l).exp() / s;
            let g = l - y + e - step;
            let next = l - g / (1.0 + 2.0 * e);
            if (next - l).abs() <= 1e-15 * (1.0 + l.abs()) {
                l = next;
                break;
            }
            l = next;
        }
        let d = l.exp();
        head.chol[[j, j]] = d;
        for i in j + 1..n {
            head.chol[[i, j]] *= d;
        }
    }
}

/// KL-regularized behavioural cloning with the faithful loss.
///
/// Each iteration takes a clipped gradient step on the data term and then a
/// proximal step on the KL term, so any `lambda_kl` is stable.
pub fn fit_bc(
    policy: &HetStatPolicy,
    demos: &ContinuousDemoSet,
    config: &FitConfig,
) -> Result<(HetStatPolicy, FitReport)> {
    if config.iterations == 0 {
        return Err(invalid_arg("fitting needs at least one iteration"));
    }
    if !(config.lambda_kl >= 0.0) || !(config.learning_rate > 0.0) {
        return Err(invalid_arg(
            "lambda_kl must be nonnegative and the learning rate positive",
        ));
    }
    let mut current = policy.clone();
    let n_weights = current.feature_map.weights.len();
    let prox_step = config.learning_rate * config.lambda_kl / demos.len().max(1) as f64;
    let mut losses = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let (loss, mut grad) = bc_data_grad(&current, demos)?;
        let kl: f64 = current.heads.iter().map(GaussianHead::kl_to_prior).sum();
        let total = loss + config.lambda_kl * kl / demos.len() as f64;
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                iteration,
                reason: format!("non-finite loss {total}"),
            });
        }
        losses.push(total);
        if config.freeze_features {
            grad.slice_mut(s![..n_weights]).fill(0.0);
        }
        clip_gradient(&mut grad, GRAD_CLIP);
        let mut params = current.parameters();
        params.scaled_add(-config.learning_rate, &grad);
        set_parameters_unchecked(&mut current, params.view());
        if prox_step > 0.0 {
            for head in &mut current.heads {
                kl_prox(head, prox_step);
            }
        }
        if let Err(e) = current.validate() {
            return Err(Error::Training {
                iteration,
                reason: e.to_string(),
            });
        }
    }
    Ok((current, FitReport { losses }))
}

/// Writes parameters without validating the result.
pub(crate) fn set_parameters_unchecked(policy: &mut HetStatPolicy, params: ArrayView1<f64>) {
    let mut it = params.iter().copied();
    for w in policy.feature_map.weights.iter_mut() {
        *w = it.next().unwrap_or_default();
    }
    for h in &mut policy.heads {
        let n = h.chol.nrows();
        for m in h.mean.iter_mut() {
            *m = it.next().unwrap_or_default();
        }
        for j in 0..n {
            h.chol[[j, j]] = it.next().unwrap_or_default().exp();
        }
        for i in 0..n {
            for j in 0..i {
                h.chol[[i, j]] = it.next().unwrap_or_default() * h.chol[[j, j]];
            }
        }
    }
}

/// Appends the gradient with respect to the factor coordinates of
/// [`HetStatPolicy::parameters`], given the gradient `g` with respect to the
/// lower-triangular factor `l` itself.
fn push_factor_grad(out: &mut Vec<f64>, g: &Array2<f64>, l: &Array2<f64>) {
    let n = l.nrows();
    out.extend((0..n).map(|j| (j..n).map(|i| g[[i, j]] * l[[i, j]]).sum::<f64>()));
    for i in 0..n {
        out.extend((0..i).map(|j| g[[i, j]] * l[[j, j]]));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn small_policy(seed: u64) -> HetStatPolicy {
        let map = sample_feature_map(1, 8, 0.7, Activation::Sinusoid, seed).unwrap();
        HetStatPolicy::prior(map, 1, 0.5, 1e-3).unwrap()
    }

    #[test]
    fn activations_have_half_mean_square_and_matching_slopes() {
        for act in [Activation::Sinusoid, Activation::Triangular, Activation::PeriodicRelu] {
            let m = 100_000;
            let (mut mean, mut sq) = (0.0, 0.0);
            for k in 0..m {
                let u = 2.0 * PI * (k as f64 + 0.5) / m as f64;
                let f = act.eval(u).0;
                mean += f / m as f64;
                sq += f * f / m as f64;
            }
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(sq, 0.5, epsilon = 1e-6);
            for u in [0.3, 1.1, 2.0, 4.4, -5.9] {
                let h = 1e-6;
                let fd = (act.eval(u + h).0 - act.eval(u - h).0) / (2.0 * h);
                assert_abs_diff_eq!(fd, act.eval(u).1, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn single_feature_and_determinism() {
        let one = sample_feature_map(2, 1, 1.0, Activation::Sinusoid, 3).unwrap();
        assert_eq!(one.weights().dim(), (1, 2));
        let a = sample_feature_map(1, 64, 0.5, Activation::Triangular, 9).unwrap();
        let b = sample_feature_map(1, 64, 0.5, Activation::Triangular, 9).unwrap();
        assert_eq!(a, b);
        assert!(sample_feature_map(1, 0, 1.0, Activation::Sinusoid, 0).is_err());
        assert!(sample_feature_map(1, 4, 0.0, Activation::Sinusoid, 0).is_err());
    }

    #[test]
    fn prior_feature_norm_is_constant_for_sinusoid_pairs() {
        let map = sample_feature_map(1, 32, 0.5, Activation::Sinusoid, 1).unwrap();
        for s in [-3.0, -0.2, 0.0, 1.7, 8.0] {
            let phi = map.features(array![s].view()).unwrap();
            assert_abs_diff_eq!(phi.dot(&phi), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn predictive_quadratic_form() {
        let map = sample_feature_map(1, 6, 1.0, Activation::Sinusoid, 2).unwrap();
        let c = 0.3;
        let policy = HetStatPolicy::prior(map.clone(), 2, c, 0.01).unwrap();
        let state = array![0.4];
        let phi = map.features(state.view()).unwrap();
        for (m, v) in policy.predictive(state.view()).unwrap() {
            assert_eq!(m, 0.0);
            assert_abs_diff_eq!(v, c * phi.dot(&phi) + 0.01, epsilon = 1e-14);
        }
    }

    #[test]
    fn log_prob_at_origin_and_variance_scaling() {
        let map = sample_feature_map(1, 2, 1.0, Activation::Sinusoid, 0).unwrap();
        // Unit feature norm, so prior scale 1 - sigma_min gives variance 1.
        let policy = HetStatPolicy::prior(map.clone(), 1, 0.75, 0.25).unwrap();
        let lp = policy.log_prob(array![0.2].view(), array![0.0].view()).unwrap();
        assert_abs_diff_eq!(lp, -0.5 * (2.0 * PI).ln(), epsilon = 1e-12);
        let wide = HetStatPolicy::prior(map, 1, 3.0, 1.0).unwrap();
        let lp4 = wide.log_prob(array![0.2].view(), array![0.0].view()).unwrap();
        assert_abs_diff_eq!(lp - lp4, 0.5 * 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn deterministic_limit_samples_tanh_of_mean() {
        let map = sample_feature_map(1, 4, 1.0, Activation::Sinusoid, 5).unwrap();
        let mut policy = HetStatPolicy::prior(map, 1, 1.0, 0.0).unwrap();
        let mut params = policy.parameters();
        let nw = 4;
        for (k, p) in params.iter_mut().enumerate().skip(nw) {
            if k < nw + 4 {
                *p = 0.3 * (k - nw) as f64;
            }
        }
        set_parameters_unchecked(&mut policy, params.view());
        for h in &mut policy.heads {
            h.chol.fill(0.0);
        }
        let state = array![0.9];
        let (m, v) = policy.predictive(state.view()).unwrap()[0];
        assert_eq!(v, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = policy.sample_action(state.view(), &mut rng).unwrap();
        assert_eq!(a[0], m.tanh());
    }

    #[test]
    fn parameters_round_trip_and_reject_bad_values() {
        let mut policy = small_policy(4);
        let p = policy.parameters();
        assert_eq!(p.len(), policy.n_parameters());
        policy.set_parameters(p.view()).unwrap();
        assert_eq!(policy.parameters(), p);
        let mut bad = p.clone();
        bad[0] = f64::NAN;
        assert!(policy.set_parameters(bad.view()).is_err());
        assert!(policy.set_parameters(p.slice(s![1..])).is_err());
    }

    #[test]
    fn kl_is_zero_at_prior_and_positive_elsewhere() {
        let mut head = GaussianHead::prior(5, 0.7).unwrap();
        assert_abs_diff_eq!(head.kl_to_prior(), 0.0, epsilon = 1e-12);
        head.mean[1] = 0.2;
        assert!(head.kl_to_prior() > 0.0);
    }

    #[test]
    fn kl_prox_solves_its_stationarity_condition() {
        let mut head = GaussianHead::prior(3, 0.5).unwrap();
        head.chol[[0, 0]] = 0.4;
        head.chol[[2, 1]] = 0.3;
        head.chol[[1, 1]] = 2.0;
        head.mean[0] = 1.0;
        let before = head.clone();
        let step = 0.2;
        kl_prox(&mut head, step);
        let s = 0.5;
        assert_abs_diff_eq!(head.mean[0], 1.0 / (1.0 + step / s), epsilon = 1e-15);
        // Unit-factor entry: (m - y)/step + exp(2 l_old) m / s = 0 with the
        // diagonal of the first block.
        let (d_old, m_old) = (before.chol[[1, 1]], before.chol[[2, 1]] / before.chol[[1, 1]]);
        let m = m_old / (1.0 + step * d_old * d_old / s);
        assert_abs_diff_eq!(head.chol[[2, 1]] / head.chol[[1, 1]], m, epsilon = 1e-12);
        // Log-diagonal: (l - y)/step + c exp(2l)/s - 1 = 0.
        for (j, c) in [(0, 1.0), (1, 1.0 + m * m), (2, 1.0)] {
            let (l, y) = (head.chol[[j, j]].ln(), before.chol[[j, j]].ln());
            assert_abs_diff_eq!((l - y) / step + c * (2.0 * l).exp() / s - 1.0, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn demo_csv_round_trip() {
        let demos = ContinuousDemoSet::new(array![[0.1, -2.0], [0.5, 3.25]], array![[0.25], [-1.0]]).unwrap();
        let mut buf = Vec::new();
        demos.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("s_0,s_1,a_0\n"));
        let back = ContinuousDemoSet::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, demos);
        assert!(ContinuousDemoSet::read_csv("a_0,s_0\n0,0\n".as_bytes()).is_err());
        assert!(ContinuousDemoSet::new(array![[0.0]], array![[1.5]]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let policy = small_policy(8);
        let back = HetStatPolicy::from_json(&policy.to_json().unwrap()).unwrap();
        assert_eq!(back, policy);
    }

    #[test]
    fn fit_rejects_zero_iterations() {
        let demos = ContinuousDemoSet::new(array![[0.0]], array![[0.1]]).unwrap();
        let cfg = FitConfig {
            iterations: 0,
            ..FitConfig::default()
        };
        assert!(fit_bc(&small_policy(0), &demos, &cfg).is_err());
    }
}
