//! Adaptive random-walk Metropolis-Hastings on the torus.
//!
//! Chains advance in lockstep so every iteration evaluates one batch of
//! proposals. The proposal covariance adapts during an initial phase only;
//! convergence is not tested until that phase lies entirely inside the
//! discarded burn-in, so extracted samples come from a fixed kernel.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{EnergyError, NormalizedOracle, RewardParams};
use crate::torus::{wrap_signed, TorusPoint};

pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

pub type Result<T> = std::result::Result<T, McmcError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub n_chains: usize,
    /// Stop once `max R − 1` falls below this.
    pub r_threshold: f64,
    pub burn_in: f64,
    pub n_samples: usize,
    /// Steps between covariance updates during adaptation.
    pub adapt_interval: usize,
    /// Number of steps during which the covariance adapts.
    pub adapt_steps: usize,
    /// Pool the adaptation window over all chains instead of per chain.
    pub pool_adaptation: bool,
    /// Proposal standard deviation before the first adaptation, and the
    /// fallback when the window covariance is singular.
    pub init_scale: f64,
    /// Minimum steps between convergence checks.
    pub check_every: usize,
    /// Safety cap on steps per chain.
    pub max_steps: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_chains: 4,
            r_threshold: 0.01,
            burn_in: 0.2,
            n_samples: 1000,
            adapt_interval: 500,
            adapt_steps: 5000,
            pool_adaptation: true,
            init_scale: 0.5,
            check_every: 1000,
            max_steps: 1_000_000,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(McmcError::Contract(m.to_string()));
        if self.n_chains < 2 {
            return bad("at least two chains are needed for the convergence test");
        }
        if !(self.r_threshold > 0.0) {
            return bad("r_threshold must be positive");
        }
        if !(self.burn_in > 0.0 && self.burn_in < 1.0) {
            return bad("burn_in must lie in (0, 1)");
        }
        if self.adapt_interval == 0 || self.check_every == 0 || self.max_steps == 0 {
            return bad("intervals and the step cap must be positive");
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be positive");
        }
        Ok(())
    }

    /// Chains shorter than this still have adaptation steps outside the
    /// burn-in region.
    fn min_length(&self) -> usize {
        (self.adapt_steps as f64 / self.burn_in).ceil() as usize
    }
}

#[derive(Debug, Clone)]
pub struct Chain {
    current: TorusPoint,
    current_log_target: f64,
    dim: usize,
    // flattened, one row of `dim` angles per step
    history: Vec<f64>,
    covariance: DMatrix<f64>,
    cholesky: DMatrix<f64>,
    accepted: usize,
    proposed: usize,
    non_finite: usize,
}

impl Chain {
    pub fn new(start: TorusPoint, log_target: f64, covariance: DMatrix<f64>) -> Result<Self> {
        let dim = start.dim();
        if covariance.nrows() != dim || covariance.ncols() != dim {
            return Err(McmcError::Contract(format!("covariance is {}x{} for dimension {dim}", covariance.nrows(), covariance.ncols())));
        }
        let mut chain = Chain {
            history: start.angles().to_vec(),
            current: start,
            current_log_target: log_target,
            dim,
            cholesky: DMatrix::zeros(dim, dim),
            covariance: DMatrix::zeros(dim, dim),
            accepted: 0,
            proposed: 0,
            non_finite: 0,
        };
        chain.set_covariance(covariance)?;
        Ok(chain)
    }

    /// Replaces the proposal covariance. A zero matrix gives a stationary chain.
    pub fn set_covariance(&mut self, covariance: DMatrix<f64>) -> Result<()> {
        let sym = (&covariance - covariance.transpose()).abs().max();
        if !covariance.iter().all(|v| v.is_finite()) || sym > 1e-12 {
            return Err(McmcError::Contract("covariance must be finite and symmetric".into()));
        }
        self.cholesky = if covariance.iter().all(|&v| v == 0.0) {
            covariance.clone()
        } else {
            Cholesky::new(covariance.clone())
                .ok_or_else(|| McmcError::Contract("covariance is not positive definite".into()))?
                .l()
        };
        self.covariance = covariance;
        Ok(())
    }

    pub fn current(&self) -> &TorusPoint {
        &self.current
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn len(&self) -> usize {
        self.history.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn history(&self) -> impl Iterator<Item = &[f64]> {
        self.history.chunks_exact(self.dim)
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.history[i * self.dim..(i + 1) * self.dim]
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// Proposals whose target value was not finite; each was rejected.
    pub fn non_finite(&self) -> usize {
        self.non_finite
    }

    fn propose<R: Rng + ?Sized>(&self, rng: &mut R) -> TorusPoint {
        let z = DVector::from_iterator(self.dim, (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let step = &self.cholesky * z;
        self.current.shifted(step.as_slice())
    }

    fn accept<R: Rng + ?Sized>(&mut self, proposal: TorusPoint, log_target: f64, rng: &mut R) {
        self.proposed += 1;
        if !log_target.is_finite() {
            self.non_finite += 1;
        } else {
            let delta = log_target - self.current_log_target;
            // the random-walk proposal is symmetric on the torus
            if delta >= 0.0 || rng.random::<f64>().ln() < delta {
                self.current = proposal;
                self.current_log_target = log_target;
                self.accepted += 1;
            }
        }
        self.history.extend_from_slice(self.current.angles());
    }
}

/// One Metropolis-Hastings step of `chain` against `log_target`.
pub fn mh_step<F, R>(chain: &mut Chain, log_target: F, rng: &mut R)
where
    F: Fn(&TorusPoint) -> f64,
    R: Rng + ?Sized,
{
    let proposal = chain.propose(rng);
    let lt = log_target(&proposal);
    chain.accept(proposal, lt, rng);
}

fn scaled_identity(dim: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::identity(dim, dim) * (scale * scale)
}

/// `(2.38²/d)·Σ + εI` where `Σ` is the wrap-aware sample covariance of
/// `window` around its circular mean. Falls back to `fallback_scale²·I`
/// when the window is too short or `Σ` is numerically singular.
pub fn adapt_covariance(window: &[&[f64]], dim: usize, fallback_scale: f64) -> DMatrix<f64> {
    let n = window.len();
    if n < 2 * dim || dim == 0 {
        return scaled_identity(dim, fallback_scale);
    }
    let mean: Vec<f64> = (0..dim)
        .map(|j| {
            let (s, c) = window.iter().fold((0.0, 0.0), |(s, c), p| (s + p[j].sin(), c + p[j].cos()));
            s.atan2(c)
        })
        .collect();
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut dev = vec![0.0; dim];
    for p in window {
        for j in 0..dim {
            dev[j] = wrap_signed(p[j] - mean[j]);
        }
        for a in 0..dim {
            for b in 0..=a {
                cov[(a, b)] += dev[a] * dev[b];
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
    }
    cov *= 2.38f64.powi(2) / dim as f64 / (n - 1) as f64;
    let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
    if !(min_eig > EIGEN_FLOOR) {
        return scaled_identity(dim, fallback_scale);
    }
    cov + DMatrix::identity(dim, dim) * EIGEN_FLOOR
}

/// Potential-scale-reduction factor per angle.
///
/// Each angle is embedded as `(sin θ, cos θ)`, the statistic is computed
/// for both coordinates and the larger is reported. Uses
/// `R = sqrt((W + B/n) / W)`, so identical chains give exactly 1.
pub fn gelman_rubin(chains: &[&[&[f64]]]) -> Result<Vec<f64>> {
    let m = chains.len();
    if m < 2 {
        return Err(McmcError::Contract("need at least two chains".into()));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(McmcError::Contract("chains have unequal lengths".into()));
    }
    if n < 10 {
        return Err(McmcError::Contract(format!("chains of length {n} are too short")));
    }
    let dim = chains[0][0].len();
    let psrf = |f: &dyn Fn(&[f64]) -> f64| -> f64 {
        let mut means = Vec::with_capacity(m);
        let mut w = 0.0;
        for c in chains {
            let mean = c.iter().map(|p| f(p)).sum::<f64>() / n as f64;
            let var = c.iter().map(|p| (f(p) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            means.push(mean);
            w += var;
        }
        w /= m as f64;
        if means.iter().all(|&x| x == means[0]) {
            return 1.0;
        }
        let grand = means.iter().sum::<f64>() / m as f64;
        let b_over_n = means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
        if b_over_n == 0.0 {
            1.0
        } else if w == 0.0 {
            f64::INFINITY
        } else {
            ((w + b_over_n) / w).sqrt()
        }
    };
    Ok((0..dim)
        .map(|j| psrf(&|p: &[f64]| p[j].sin()).max(psrf(&|p: &[f64]| p[j].cos())))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcDiagnostics {
    pub converged: bool,
    /// Final per-angle R values.
    pub r_hat: Vec<f64>,
    pub acceptance_rates: Vec<f64>,
    pub chain_length: usize,
    pub burn_in_steps: usize,
    pub non_finite_proposals: usize,
}

#[derive(Debug, Clone)]
pub struct McmcRun {
    pub samples: Vec<TorusPoint>,
    pub diagnostics: McmcDiagnostics,
    pub chains: Vec<Chain>,
}

/// `log R(x) = −β·E_norm(x)` for each point, as a batch target.
pub fn boltzmann_log_target<'a>(
    oracle: &'a NormalizedOracle,
    reward: RewardParams,
) -> impl FnMut(&[TorusPoint]) -> std::result::Result<Vec<f64>, EnergyError> + 'a {
    move |points| Ok(oracle.evaluate_normalized(points)?.into_iter().map(|e| reward.log_reward(e)).collect())
}

fn post_burn_in(chain: &Chain, skip: usize) -> Vec<&[f64]> {
    chain.history().skip(skip).collect()
}

/// Runs `cfg.n_chains` chains from uniform starting points until the
/// largest `R − 1` drops below the threshold or the step cap is reached,
/// then draws `cfg.n_samples` points without replacement from the pooled
/// post-burn-in histories.
pub fn run_mcmc<F, R>(cfg: &McmcConfig, dim: usize, mut log_target: F, rng: &mut R) -> Result<McmcRun>
where
    F: FnMut(&[TorusPoint]) -> std::result::Result<Vec<f64>, EnergyError>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if dim == 0 {
        return Err(McmcError::Contract("dimension must be positive".into()));
    }
    let mut eval = |pts: &[TorusPoint]| -> Result<Vec<f64>> {
        let v = log_target(pts)?;
        if v.len() != pts.len() {
            return Err(McmcError::Contract(format!("target returned {} values for {} points", v.len(), pts.len())));
        }
        Ok(v)
    };
    let starts: Vec<TorusPoint> = (0..cfg.n_chains).map(|_| TorusPoint::uniform(dim, rng)).collect();
    let start_lt = eval(&starts)?;
    let mut chains = starts
        .into_iter()
        .zip(start_lt)
        .map(|(p, lt)| Chain::new(p, lt, scaled_identity(dim, cfg.init_scale)))
        .collect::<Result<Vec<_>>>()?;

    let min_len = cfg.min_length().max(10);
    let mut next_check = min_len.max(cfg.check_every);
    let mut r_hat = vec![f64::INFINITY; dim];
    let mut converged = false;
    // history includes the starting point
    while chains[0].len() < cfg.max_steps {
        let proposals: Vec<TorusPoint> = chains.iter().map(|c| c.propose(rng)).collect();
        let lts = eval(&proposals)?;
        for ((c, p), lt) in chains.iter_mut().zip(proposals).zip(lts) {
            c.accept(p, lt, rng);
        }
        let steps = chains[0].len() - 1;
        if steps < cfg.adapt_steps && steps % cfg.adapt_interval == 0 {
            adapt(&mut chains, cfg, dim)?;
        }
        let len = chains[0].len();
        if len >= next_check {
            let skip = (len as f64 * cfg.burn_in).floor() as usize;
            let kept: Vec<Vec<&[f64]>> = chains.iter().map(|c| post_burn_in(c, skip)).collect();
            let refs: Vec<&[&[f64]]> = kept.iter().map(|v| v.as_slice()).collect();
            r_hat = gelman_rubin(&refs)?;
            if r_hat.iter().all(|r| r - 1.0 < cfg.r_threshold) {
                converged = true;
                break;
            }
            next_check = (len + cfg.check_every).max((len as f64 * 1.1) as usize);
        }
    }

    let len = chains[0].len();
    let skip = (len as f64 * cfg.burn_in).floor() as usize;
    if !converged && len >= 10 + skip {
        let kept: Vec<Vec<&[f64]>> = chains.iter().map(|c| post_burn_in(c, skip)).collect();
        let refs: Vec<&[&[f64]]> = kept.iter().map(|v| v.as_slice()).collect();
        r_hat = gelman_rubin(&refs)?;
    }
    let per_chain = len - skip;
    let pool = per_chain * chains.len();
    if cfg.n_samples > pool {
        return Err(McmcError::Contract(format!("{} samples requested from a pool of {pool}", cfg.n_samples)));
    }
    let samples = index::sample(rng, pool, cfg.n_samples)
        .into_iter()
        .map(|i| TorusPoint::new(chains[i / per_chain].point(skip + i % per_chain).to_vec()))
        .collect();
    let diagnostics = McmcDiagnostics {
        converged,
        r_hat,
        acceptance_rates: chains.iter().map(|c| c.acceptance_rate()).collect(),
        chain_length: len,
        burn_in_steps: skip,
        non_finite_proposals: chains.iter().map(|c| c.non_finite()).sum(),
    };
    Ok(McmcRun { samples, diagnostics, chains })
}

fn adapt(chains: &mut [Chain], cfg: &McmcConfig, dim: usize) -> Result<()> {
    let window = cfg.adapt_interval;
    if cfg.pool_adaptation {
        let pts: Vec<&[f64]> = chains
            .iter()
            .flat_map(|c| c.history().skip(c.len().saturating_sub(window)))
            .collect();
        let cov = adapt_covariance(&pts, dim, cfg.init_scale);
        for c in chains.iter_mut() {
            c.set_covariance(cov.clone())?;
        }
    } else {
        for c in chains.iter_mut() {
            let pts: Vec<&[f64]> = c.history().skip(c.len().saturating_sub(window)).collect();
            let cov = adapt_covariance(&pts, dim, cfg.init_scale);
            c.set_covariance(cov)?;
        }
    }
    Ok(())
}
