use rand::Rng;

use super::{GflowNet, Result, TrainConfig, TrainError, Trajectory};
use crate::energy::{NormalizedOracle, RewardParams};
use crate::policy::{uniform_increment, TrajectoryState};

/// Rolls out one batch of trajectories.
///
/// `explore[i][t]` selects a uniform increment for step `t` of trajectory
/// `i`; the recorded forward log-density is always the current policy's
/// density of the increment actually taken. Terminal energies are evaluated
/// in a single oracle call. With `score_backward` the backward
/// log-densities are filled in, otherwise they are left at zero.
pub fn rollout_batch<R: Rng + ?Sized>(
    gfn: &GflowNet,
    oracle: &NormalizedOracle,
    reward: RewardParams,
    explore: &[Vec<bool>],
    rng: &mut R,
    score_backward: bool,
) -> Result<Vec<Trajectory>> {
    let d = gfn.dim();
    let horizon = gfn.horizon();
    if oracle.dimension() != d {
        return Err(TrainError::Contract(format!("oracle dimension {} vs policy dimension {d}", oracle.dimension())));
    }
    if let Some(e) = explore.iter().find(|e| e.len() != horizon) {
        return Err(TrainError::Contract(format!("{} exploration flags for horizon {horizon}", e.len())));
    }
    let n = explore.len();
    let mut states: Vec<Vec<TrajectoryState>> = (0..n).map(|_| vec![TrajectoryState::source(d)]).collect();
    let mut increments: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(horizon); n];
    let mut log_pf: Vec<Vec<f64>> = vec![Vec::with_capacity(horizon); n];

    for t in 0..horizon {
        let current: Vec<&TrajectoryState> = states.iter().map(|s| s.last().unwrap()).collect();
        let outputs = gfn.forward.outputs(&current)?;
        for (i, out) in outputs.iter().enumerate() {
            let inc = if explore[i][t] { uniform_increment(d, rng) } else { out.sample(rng) };
            log_pf[i].push(out.log_pdf(&inc));
            let next = states[i].last().unwrap().advance(&inc);
            states[i].push(next);
            increments[i].push(inc);
        }
    }

    let mut log_pb: Vec<Vec<f64>> = vec![vec![0.0; horizon]; n];
    if score_backward && horizon > 1 && n > 0 {
        let rows: Vec<(usize, usize)> = (0..n).flat_map(|i| (2..=horizon).map(move |t| (i, t))).collect();
        let st: Vec<&TrajectoryState> = rows.iter().map(|&(i, t)| &states[i][t]).collect();
        let outputs = gfn.backward.outputs(&st)?;
        for (&(i, t), out) in rows.iter().zip(&outputs) {
            let dec = states[i][t].point().signed_diff(states[i][t - 1].point());
            log_pb[i][t - 1] = out.log_pdf(&dec);
        }
    }

    let terminals: Vec<_> = states.iter().map(|s| s.last().unwrap().point().clone()).collect();
    let (raw, norm) = oracle.evaluate(&terminals)?;

    Ok(states
        .into_iter()
        .zip(increments)
        .zip(log_pf.into_iter().zip(log_pb))
        .zip(raw.into_iter().zip(norm))
        .map(|(((states, increments), (log_pf, log_pb)), (energy, energy_normalized))| Trajectory {
            states,
            increments,
            log_pf,
            log_pb,
            energy,
            energy_normalized,
            log_reward: reward.log_reward(energy_normalized),
        })
        .collect())
}

/// Rolls out a single trajectory. With `explore`, every step is uniform.
pub fn rollout<R: Rng + ?Sized>(
    gfn: &GflowNet,
    oracle: &NormalizedOracle,
    cfg: &TrainConfig,
    rng: &mut R,
    explore: bool,
) -> Result<Trajectory> {
    let flags = vec![vec![explore; gfn.horizon()]];
    Ok(rollout_batch(gfn, oracle, RewardParams { beta: cfg.beta }, &flags, rng, true)?.pop().unwrap())
}
