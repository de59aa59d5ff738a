//! Exact tabular soft-RL and inverse-RL algorithms, plus a continuous
//! contextual-bandit track built on stationary-feature stochastic policies.
//!
//! The tabular side ([`mdp`], [`soft_rl`], [`imitation`], [`study`]) works
//! with known dynamics and exact dynamic programming. The continuous side
//! ([`stationary`], [`coherent`]) fits squashed-Gaussian policies whose
//! log-density doubles as a reward.

pub mod coherent;
pub mod error;
pub mod imitation;
pub mod mdp;
pub mod soft_rl;
pub mod stationary;
pub mod study;

pub use coherent::{BanditConfig, CoherentReward};
pub use error::{Error, Result};
pub use imitation::{ImitationResult, Learned};
pub use mdp::{Cell, DemoSet, GridAction, GridKind, GridSpec, OccupancyTable, TabularMdp, TabularPolicy, Transition};
pub use soft_rl::{RewardTable, SoftSolution};
pub use stationary::{Activation, ContinuousDemoSet, GaussianHead, HetStatPolicy, PeriodicFeatureMap};
