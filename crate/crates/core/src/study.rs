//! The tabular imitation study: every learner on the dense and sparse
//! gridworlds, trained on nominal dynamics and scored on nominal and windy
//! dynamics, over several demonstration seeds.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imitation::{
    bc_tabular, classifier_tabular, csil_tabular, gail_tabular, meirl_tabular, CsilConfig, GailConfig, ImitationResult,
    Learned, MeIrlConfig,
};
use crate::mdp::{
    build_gridworld, sample_demonstrations, windy_transform, DemoSet, GridAction, GridKind, GridSpec, TabularMdp,
    TabularPolicy,
};
use crate::soft_rl::{solve_soft, SoftSolution, SoftViConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Expert,
    Bc,
    Classifier,
    Meirl,
    Gail,
    Csil,
}

impl AgentKind {
    pub const ALL: [AgentKind; 6] = [
        AgentKind::Expert,
        AgentKind::Bc,
        AgentKind::Classifier,
        AgentKind::Meirl,
        AgentKind::Gail,
        AgentKind::Csil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Expert => "expert",
            AgentKind::Bc => "bc",
            AgentKind::Classifier => "classifier",
            AgentKind::Meirl => "meirl",
            AgentKind::Gail => "gail",
            AgentKind::Csil => "csil",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgentKind::ALL
            .into_iter()
            .find(|a| a.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Parse(format!("unknown agent `{s}`")))
    }
}

pub fn env_name(kind: GridKind) -> &'static str {
    match kind {
        GridKind::Dense => "dense",
        GridKind::Sparse => "sparse",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub dense: GridSpec,
    pub sparse: GridSpec,
    pub dense_episodes: usize,
    pub sparse_episodes: usize,
    pub horizon: usize,
    pub wind_prob: f64,
    pub wind_action: GridAction,
    pub expert_alpha: f64,
    pub bc_smoothing: f64,
    pub classifier_alpha: f64,
    pub csil: CsilConfig,
    pub meirl: MeIrlConfig,
    pub gail: GailConfig,
    pub n_seeds: usize,
    pub master_seed: u64,
    pub agents: Vec<AgentKind>,
    /// Worker threads; 1 runs every cell on the calling thread.
    pub jobs: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            dense: GridSpec::dense_default(),
            sparse: GridSpec::sparse_default(),
            dense_episodes: 10,
            sparse_episodes: 1,
            horizon: 100,
            wind_prob: 0.2,
            wind_action: GridAction::East,
            expert_alpha: 0.1,
            bc_smoothing: 1.0,
            classifier_alpha: 0.1,
            csil: CsilConfig::default(),
            meirl: MeIrlConfig::default(),
            gail: GailConfig::default(),
            n_seeds: 10,
            master_seed: 0,
            agents: AgentKind::ALL.to_vec(),
            jobs: 1,
        }
    }
}

/// Seed for cell `index`, drawn from its own ChaCha stream of `master`.
pub fn cell_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

/// One environment of the study with its expert.
#[derive(Clone, Debug)]
pub struct StudyEnv {
    pub kind: GridKind,
    pub spec: GridSpec,
    pub nominal: TabularMdp,
    pub windy: TabularMdp,
    pub expert: SoftSolution,
    pub n_episodes: usize,
}

impl StudyEnv {
    pub fn build(spec: &GridSpec, n_episodes: usize, config: &StudyConfig) -> Result<Self> {
        let nominal = build_gridworld(spec)?;
        let windy = windy_transform(&nominal, config.wind_prob, config.wind_action.index())?;
        let prior = TabularPolicy::uniform(nominal.n_states(), nominal.n_actions());
        let expert = solve_soft(
            &nominal,
            nominal.reward(),
            &prior,
            &SoftViConfig::new(config.expert_alpha, nominal.discount()),
            None,
        )?;
        Ok(Self {
            kind: spec.kind,
            spec: spec.clone(),
            nominal,
            windy,
            expert,
            n_episodes,
        })
    }
}

/// Trains one agent on `demos` with the environment's dynamics.
pub fn train_agent(agent: AgentKind, env: &StudyEnv, demos: &DemoSet, config: &StudyConfig) -> Result<Learned> {
    let mdp = env.nominal.without_reward();
    let prior = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
    match agent {
        AgentKind::Expert => Ok(Learned::policy_only(env.expert.policy.clone())),
        AgentKind::Bc => Ok(Learned::policy_only(bc_tabular(demos, &prior, config.bc_smoothing)?)),
        AgentKind::Classifier => classifier_tabular(&mdp, demos, config.classifier_alpha),
        AgentKind::Meirl => meirl_tabular(&mdp, demos, &config.meirl),
        AgentKind::Gail => gail_tabular(&mdp, demos, &config.gail),
        AgentKind::Csil => {
            let csil = CsilConfig {
                smoothing: config.bc_smoothing,
                ..config.csil
            };
            csil_tabular(&mdp, demos, &prior, &csil)
        }
    }
}

#[derive(Clone, Debug)]
pub struct StudyRow {
    pub env: GridKind,
    pub agent: AgentKind,
    pub seed: usize,
    pub outcome: std::result::Result<ImitationResult, String>,
}

#[derive(Clone, Debug)]
pub struct StudyResult {
    pub disturbance: String,
    pub envs: Vec<StudyEnv>,
    pub rows: Vec<StudyRow>,
}

pub const STUDY_CSV_HEADER: &str = "env,disturbance,agent,seed,nominal_return,windy_return";

impl StudyResult {
    pub fn failures(&self) -> impl Iterator<Item = (&StudyRow, &str)> {
        self.rows
            .iter()
            .filter_map(|r| r.outcome.as_ref().err().map(|e| (r, e.as_str())))
    }

    /// Successful `(nominal, windy)` returns of one agent on one env, in seed order.
    pub fn returns(&self, env: GridKind, agent: AgentKind) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.env == env && r.agent == agent)
            .filter_map(|r| r.outcome.as_ref().ok())
            .map(|res| (res.nominal_return, res.windy_return))
            .collect()
    }

    /// Median nominal and windy returns over seeds.
    pub fn median(&self, env: GridKind, agent: AgentKind) -> Option<(f64, f64)> {
        let rows = self.returns(env, agent);
        if rows.is_empty() {
            return None;
        }
        let nominal = median(rows.iter().map(|r| r.0).collect());
        let windy = median(rows.iter().map(|r| r.1).collect());
        Some((nominal, windy))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(STUDY_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let (nominal, windy) = match &row.outcome {
                Ok(res) => (res.nominal_return, res.windy_return),
                Err(_) => (f64::NAN, f64::NAN),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                env_name(row.env),
                self.disturbance,
                row.agent,
                row.seed,
                nominal,
                windy
            );
        }
        out
    }

    /// One CSV per agent with every diagnostic it reported.
    pub fn diagnostics_csv(&self, agent: AgentKind) -> String {
        let mut out = String::from("env,seed,name,value\n");
        for row in self.rows.iter().filter(|r| r.agent == agent) {
            if let Ok(res) = &row.outcome {
                for (name, value) in &res.diagnostics {
                    let _ = writeln!(out, "{},{},{},{}", env_name(row.env), row.seed, name, value);
                }
            }
        }
        out
    }
}

pub fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs every `(env, seed, agent)` cell. Cell failures are recorded in the
/// result rather than aborting the study.
pub fn run_table1_study(config: &StudyConfig) -> Result<StudyResult> {
    if config.n_seeds == 0 {
        return Err(Error::InvalidArgument("study needs at least one seed".into()));
    }
    let envs = vec![
        StudyEnv::build(&config.dense, config.dense_episodes, config)?,
        StudyEnv::build(&config.sparse, config.sparse_episodes, config)?,
    ];
    let cells: Vec<(usize, usize)> = (0..envs.len())
        .flat_map(|e| (0..config.n_seeds).map(move |s| (e, s)))
        .collect();

    let run_cell = |&(e, seed): &(usize, usize)| -> Vec<StudyRow> {
        let env = &envs[e];
        let demo_seed = cell_seed(config.master_seed, (e * config.n_seeds + seed) as u64);
        let demos = sample_demonstrations(
            &env.nominal,
            &env.expert.policy,
            env.n_episodes,
            config.horizon,
            demo_seed,
        );
        config
            .agents
            .iter()
            .map(|&agent| {
                let outcome = demos.as_ref().map_err(|e| e.to_string()).and_then(|demos| {
                    train_agent(agent, env, demos, config)
                        .and_then(|learned| ImitationResult::evaluate(learned, &env.nominal, &env.windy))
                        .map_err(|e| e.to_string())
                });
                StudyRow {
                    env: env.kind,
                    agent,
                    seed,
                    outcome,
                }
            })
            .collect()
    };

    let rows: Vec<StudyRow> = if config.jobs <= 1 {
        cells.iter().flat_map(run_cell).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?;
        pool.install(|| cells.par_iter().map(run_cell).collect::<Vec<_>>())
            .into_iter()
            .flatten()
            .collect()
    };
    Ok(StudyResult {
        disturbance: format!("{}@{}", config.wind_action.name(), config.wind_prob),
        envs,
        rows,
    })
}
