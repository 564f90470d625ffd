//! Continuous GFlowNet trained with trajectory balance.
//!
//! A trajectory `s₀ → s₁ → … → s_T` starts at the source, takes `T`
//! increments drawn from the forward policy, and terminates at
//! `x = s_T`. The backward policy scores decrements for `t ≥ 2`; the final
//! step back to `s₀` is deterministic.

mod buffer;
mod loss;
mod rollout;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::EnergyError;
use crate::nn::NnError;
use crate::policy::{Policy, PolicyConfig, PolicyError, TrajectoryState};
use crate::torus::TorusPoint;

pub use buffer::ReplayBuffer;
pub use loss::{tb_loss, TbLoss};
pub use rollout::{rollout, rollout_batch};
pub use train::{train, LogRow, TrainOutcome, Trainer, TrainerState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("non-finite loss or gradient at iteration {iteration}")]
    NonFinite { iteration: usize, last_good: Box<TrainerState> },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExploreMode {
    /// Whole exploratory trajectories use uniform increments.
    #[default]
    PerTrajectory,
    /// Each step is independently uniform with the exploration probability.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplaySampling {
    #[default]
    Uniform,
    RewardProportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub policy: PolicyConfig,
    pub beta: f64,
    pub iterations: usize,
    pub on_policy: usize,
    pub replay: usize,
    pub explore_prob: f64,
    pub explore_mode: ExploreMode,
    pub buffer_capacity: usize,
    pub replay_sampling: ReplaySampling,
    pub dedup_tolerance: f64,
    pub lr_policy: f64,
    pub lr_log_z: f64,
    pub grad_clip: f64,
    pub init_log_z: f64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            policy: PolicyConfig::default(),
            beta: 32.0,
            iterations: 5000,
            on_policy: 80,
            replay: 20,
            explore_prob: 0.1,
            explore_mode: ExploreMode::PerTrajectory,
            buffer_capacity: 1000,
            replay_sampling: ReplaySampling::Uniform,
            dedup_tolerance: 1e-6,
            lr_policy: 1e-4,
            lr_log_z: 1e-2,
            grad_clip: 10.0,
            init_log_z: 0.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        let bad = |m: &str| Err(TrainError::Contract(m.to_string()));
        if self.on_policy == 0 {
            return bad("on_policy count must be positive");
        }
        if !(0.0..=1.0).contains(&self.explore_prob) {
            return bad("explore_prob must lie in [0, 1]");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.lr_policy > 0.0 && self.lr_log_z > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.buffer_capacity == 0 && self.replay > 0 {
            return bad("replay needs a non-empty buffer");
        }
        Ok(())
    }
}

/// A complete trajectory with its per-step log-densities and terminal reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `s₀ … s_T`.
    pub states: Vec<TrajectoryState>,
    /// Increment applied at step `t` (index `t − 1`), each in `[-π, π)`.
    pub increments: Vec<Vec<f64>>,
    /// `log p_F(s_t | s_{t−1})` at index `t − 1`.
    pub log_pf: Vec<f64>,
    /// `log p_B(s_{t−1} | s_t)` at index `t − 1`; index 0 is the step back to
    /// the source and is always 0.
    pub log_pb: Vec<f64>,
    pub energy: f64,
    pub energy_normalized: f64,
    pub log_reward: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.increments.len()
    }

    pub fn terminal(&self) -> &TorusPoint {
        self.states.last().expect("trajectory has states").point()
    }

    pub fn reward(&self) -> f64 {
        self.log_reward.exp()
    }

    pub fn sum_log_pf(&self) -> f64 {
        self.log_pf.iter().sum()
    }

    pub fn sum_log_pb(&self) -> f64 {
        self.log_pb.iter().sum()
    }

    /// The `log Z` that zeroes this trajectory's balance residual.
    pub fn balanced_log_z(&self) -> f64 {
        self.log_reward + self.sum_log_pb() - self.sum_log_pf()
    }

    /// `log Z + Σ log p_F − log R − Σ log p_B` from the stored values.
    pub fn residual(&self, log_z: f64) -> f64 {
        log_z + self.sum_log_pf() - self.log_reward - self.sum_log_pb()
    }
}

/// Forward and backward policies plus the learned log-partition scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GflowNet {
    pub forward: Policy,
    pub backward: Policy,
    pub log_z: f64,
}

impl GflowNet {
    pub fn new<R: Rng + ?Sized>(cfg: &PolicyConfig, init_log_z: f64, rng: &mut R) -> Result<Self> {
        let forward = Policy::new(cfg.clone(), rng)?;
        let backward = Policy::new(cfg.clone(), rng)?;
        Ok(GflowNet { forward, backward, log_z: init_log_z })
    }

    pub fn dim(&self) -> usize {
        self.forward.config().dim
    }

    pub fn horizon(&self) -> usize {
        self.forward.config().horizon
    }
}
