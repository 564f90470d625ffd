//! Energy oracles, normalisation, and the Boltzmann reward.
//!
//! An [`EnergyOracle`] maps batches of torus points to scalar energies.
//! Built-in analytic potentials live in [`potential`]; real chemistry is
//! reached through the line-delimited JSON protocol in [`external`].

pub mod external;
pub mod normalize;
pub mod potential;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::torus::TorusPoint;

pub use external::ExternalOracle;
pub use normalize::{calibrate, Calibration, NormalizedOracle};
pub use potential::{AnalyticPotential, Coupling, CosineTerm, VmMode};

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("point {index} has dimension {got}, oracle expects {expected}")]
    Dimension { index: usize, expected: usize, got: usize },
    #[error("oracle returned non-finite energy {value} for point {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("failed to spawn oracle `{command}`: {source}")]
    Spawn { command: String, source: std::io::Error },
    #[error("oracle protocol version {server} (client speaks {client})")]
    Version { client: u32, server: u32 },
    #[error("oracle did not answer within {0:?}")]
    Timeout(Duration),
    #[error("oracle transport failure: {0}")]
    Transport(String),
    #[error("oracle protocol violation: {0}")]
    Protocol(String),
    #[error("oracle reported an error: {0}")]
    Remote(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("invalid potential: {0}")]
    Invalid(String),
}

impl EnergyError {
    /// Transport-level failures may succeed on a fresh connection.
    pub fn is_retryable(&self) -> bool {
        matches!(self, EnergyError::Transport(_) | EnergyError::Timeout(_))
    }
}

pub type Result<T> = std::result::Result<T, EnergyError>;

/// Deterministic batch energy evaluator over `[0, 2π)^d`.
pub trait EnergyOracle: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    /// One finite energy per point, in input order.
    fn evaluate_batch(&self, points: &[TorusPoint]) -> Result<Vec<f64>>;
}

pub(crate) fn check_dimensions(points: &[TorusPoint], expected: usize) -> Result<()> {
    match points.iter().position(|p| p.dim() != expected) {
        Some(index) => Err(EnergyError::Dimension { index, expected, got: points[index].dim() }),
        None => Ok(()),
    }
}

/// Inverse temperature of the Boltzmann reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub beta: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { beta: 32.0 }
    }
}

impl RewardParams {
    /// `ln R = −β·e`.
    #[inline]
    pub fn log_reward(&self, e_normalized: f64) -> f64 {
        -self.beta * e_normalized
    }
}

/// Boltzmann reward `exp(−β·e)` of a normalised energy.
#[inline]
pub fn reward(e_normalized: f64, params: RewardParams) -> f64 {
    params.log_reward(e_normalized).exp()
}
