//! Continuous GFlowNets for Boltzmann sampling on the hyper-torus, with an
//! adaptive Metropolis-Hastings baseline and evaluation metrics.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod energy;
pub mod eval;
pub mod gfn;
pub mod io;
pub mod mcmc;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod torus;
pub mod vonmises;

pub use energy::{EnergyError, EnergyOracle, NormalizedOracle, RewardParams};
pub use gfn::{GflowNet, TrainConfig, TrainError, Trajectory};
pub use policy::{Policy, PolicyConfig, TrajectoryState};
pub use torus::TorusPoint;
