//! End-to-end runs over a [`RunConfig`]: the operations behind the CLI.
//!
//! Every operation writes its artifacts under an output directory and is
//! reproducible from the run seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, Stream};
use crate::energy::{EnergyError, NormalizedOracle, RewardParams};
use crate::eval::{self, EvalError, Metrics};
use crate::gfn::{rollout_batch, GflowNet, LogRow, TrainError, Trainer};
use crate::io::{self, Checkpoint, IoError, SampleSet};
use crate::mcmc::{boltzmann_log_target, run_mcmc, McmcDiagnostics, McmcError};
use crate::torus::TorusPoint;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const MCMC_SAMPLES_FILE: &str = "mcmc_samples.csv";
pub const MCMC_DIAGNOSTICS_FILE: &str = "mcmc_diagnostics.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const GRID_FILE: &str = "kde_grid.csv";
pub const COMPARE_FILE: &str = "compare.json";

// trajectories rolled out per network batch when sampling
const SAMPLE_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("oracle setup: {0}")]
    Oracle(EnergyError),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Input(IoError),
    #[error(transparent)]
    Output(IoError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

impl PipelineError {
    /// Problems with what the user asked for, as opposed to failures while
    /// carrying it out.
    pub fn is_usage(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Oracle(_) | Self::Mismatch(_) | Self::Input(_))
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn setup_oracle(cfg: &RunConfig) -> Result<NormalizedOracle> {
    cfg.oracle().map_err(PipelineError::Oracle)
}

/// The configuration as echoed in reports: everything except the output
/// location, so identical runs written to different places report equally.
fn echo(cfg: &RunConfig) -> RunConfig {
    RunConfig { out: PathBuf::new(), ..cfg.clone() }
}

fn reward(cfg: &RunConfig) -> RewardParams {
    RewardParams { beta: cfg.train.beta }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: GflowNet,
    pub log: Vec<LogRow>,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Trains a model, writing `checkpoint.json` and `train_log.csv` to `out`.
///
/// With `resume`, training continues from that checkpoint and the rows of an
/// existing log in `out` up to the resume point are kept. On a non-finite
/// loss the last good state is checkpointed before the error is returned.
pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    let (oracle, mut trainer, mut log) = match resume {
        None => {
            let oracle = setup_oracle(cfg)?;
            let trainer = Trainer::new(cfg.train.clone(), &mut cfg.rng(Stream::Train))?;
            (oracle, trainer, Vec::new())
        }
        Some(path) => {
            let ck = Checkpoint::load(path).map_err(PipelineError::Input)?;
            if ck.oracle.dimension() != cfg.oracle.dimension() {
                return Err(PipelineError::Mismatch(format!(
                    "checkpoint is {}-d, config oracle is {}-d",
                    ck.oracle.dimension(),
                    cfg.oracle.dimension()
                )));
            }
            let oracle = checkpoint_oracle(&ck)?;
            let mut state = ck.state;
            state.config.iterations = cfg.train.iterations;
            state.config.checkpoint_every = cfg.train.checkpoint_every;
            let start = state.iteration;
            let trainer = Trainer::from_state(state)?;
            let previous = std::fs::File::open(out.join(TRAIN_LOG_FILE))
                .ok()
                .and_then(|f| io::read_train_log(f).ok())
                .unwrap_or_default();
            let kept = previous.into_iter().filter(|r| r.iteration <= start).collect();
            (oracle, trainer, kept)
        }
    };
    let checkpoint = out.join(CHECKPOINT_FILE);
    let log_path = out.join(TRAIN_LOG_FILE);
    let every = cfg.train.checkpoint_every;
    let save = |state, path: &Path| Checkpoint::new(cfg.oracle.clone(), oracle.calibration().clone(), state).save(path);

    let mut io_failure = None;
    let result = trainer.run(&oracle, |t, _| {
        if every > 0 && t.iteration() % every == 0 {
            if let Err(e) = save(t.state(), &checkpoint) {
                io_failure = Some(e);
                return Err(TrainError::Contract("checkpoint write failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = io_failure {
        return Err(PipelineError::Output(e));
    }
    match result {
        Ok(rows) => log.extend(rows),
        Err(TrainError::NonFinite { iteration, last_good }) => {
            save(*last_good.clone(), &checkpoint).map_err(PipelineError::Output)?;
            return Err(TrainError::NonFinite { iteration, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    }
    save(trainer.state(), &checkpoint).map_err(PipelineError::Output)?;
    io::write_atomic(&log_path, |w| io::write_train_log(&log, w)).map_err(PipelineError::Output)?;
    Ok(TrainReport { model: trainer.model().clone(), log, checkpoint, log_path })
}

fn checkpoint_oracle(ck: &Checkpoint) -> Result<NormalizedOracle> {
    let inner = ck.oracle.build().map_err(PipelineError::Oracle)?;
    NormalizedOracle::from_calibration(inner, ck.calibration.clone()).map_err(PipelineError::Oracle)
}

/// Draws `n` terminal points from `gfn` and scores them under `oracle`,
/// optionally with importance-sampled log-likelihoods.
pub fn sample_model(
    gfn: &GflowNet,
    oracle: &NormalizedOracle,
    reward: RewardParams,
    n: usize,
    likelihood_n: Option<usize>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<SampleSet> {
    let mut set = SampleSet { points: Vec::with_capacity(n), energy: Vec::new(), log_reward: Vec::new(), log_pi: None };
    let mut left = n;
    while left > 0 {
        let m = left.min(SAMPLE_CHUNK);
        let flags = vec![vec![false; gfn.horizon()]; m];
        for t in rollout_batch(gfn, oracle, reward, &flags, rng, false)? {
            set.points.push(t.terminal().clone());
            set.energy.push(t.energy);
            set.log_reward.push(t.log_reward);
        }
        left -= m;
    }
    if let Some(k) = likelihood_n {
        set.log_pi = Some(eval::estimate_log_likelihoods(&set.points, gfn, k, rng)?);
    }
    Ok(set)
}

/// Options for [`sample`].
#[derive(Debug, Clone)]
pub struct SampleRequest<'a> {
    pub checkpoint: &'a Path,
    /// Overrides the checkpoint's oracle; must agree in dimension.
    pub config: Option<&'a RunConfig>,
    pub n: usize,
    pub with_likelihood: bool,
    pub seed: u64,
    pub out: &'a Path,
}

/// Samples from a checkpoint into `out/samples.csv`.
pub fn sample(req: &SampleRequest) -> Result<SampleSet> {
    let ck = Checkpoint::load(req.checkpoint).map_err(PipelineError::Input)?;
    let model = &ck.state.model;
    let oracle = match req.config {
        Some(cfg) if cfg.oracle.dimension() != model.dim() => {
            return Err(PipelineError::Mismatch(format!(
                "checkpoint is {}-d, config oracle is {}-d",
                model.dim(),
                cfg.oracle.dimension()
            )))
        }
        Some(cfg) => {
            let inner = cfg.oracle.build().map_err(PipelineError::Oracle)?;
            NormalizedOracle::from_calibration(inner, ck.calibration.clone()).map_err(PipelineError::Oracle)?
        }
        None => checkpoint_oracle(&ck)?,
    };
    let likelihood_n = req.config.map_or(crate::config::EvalSpec::default().likelihood_n, |c| c.eval.likelihood_n);
    let mut rng = stream_rng(req.seed, Stream::Sample);
    let reward = RewardParams { beta: ck.state.config.beta };
    let set = sample_model(model, &oracle, reward, req.n, req.with_likelihood.then_some(likelihood_n), &mut rng)?;
    set.save(&req.out.join(SAMPLES_FILE)).map_err(PipelineError::Output)?;
    Ok(set)
}

fn stream_rng(seed: u64, stream: Stream) -> rand_chacha::ChaCha8Rng {
    RunConfig { seed, ..RunConfig::default() }.rng(stream)
}

/// Diagnostics document written next to MCMC samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcReport {
    pub diagnostics: McmcDiagnostics,
    pub config: RunConfig,
}

/// Runs the MCMC baseline, writing samples and diagnostics to `out`.
pub fn mcmc(cfg: &RunConfig, out: &Path) -> Result<(SampleSet, McmcDiagnostics)> {
    let oracle = setup_oracle(cfg)?;
    let (set, diagnostics) = mcmc_samples(cfg, &oracle)?;
    set.save(&out.join(MCMC_SAMPLES_FILE)).map_err(PipelineError::Output)?;
    let report = McmcReport { diagnostics: diagnostics.clone(), config: echo(cfg) };
    io::save_tagged(&out.join(MCMC_DIAGNOSTICS_FILE), io::MCMC_SCHEMA, &report).map_err(PipelineError::Output)?;
    Ok((set, diagnostics))
}

fn mcmc_samples(cfg: &RunConfig, oracle: &NormalizedOracle) -> Result<(SampleSet, McmcDiagnostics)> {
    let run = run_mcmc(&cfg.mcmc, oracle.dimension(), boltzmann_log_target(oracle, reward(cfg)), &mut cfg.rng(Stream::Mcmc))?;
    let (energy, normalized) = oracle.evaluate(&run.samples)?;
    let log_reward = normalized.iter().map(|&e| reward(cfg).log_reward(e)).collect();
    Ok((SampleSet { points: run.samples, energy, log_reward, log_pi: None }, run.diagnostics))
}

/// Metrics document written by [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub config: RunConfig,
}

/// Scores a sample set: JSD against the ground truth for `d ≤ 2`, COV/MAT
/// against `reference` and the likelihood/reward correlation when a
/// `log_pi` column is present. Also returns the sample KDE for `d ≤ 2`.
pub fn score(
    cfg: &RunConfig,
    oracle: Option<&NormalizedOracle>,
    samples: &SampleSet,
    reference: Option<&SampleSet>,
) -> Result<(Metrics, Option<eval::TorusGrid>)> {
    let dim = cfg.oracle.dimension();
    if samples.is_empty() {
        return Err(PipelineError::Mismatch("no samples to evaluate".into()));
    }
    for (what, set) in [("samples", Some(samples)), ("reference", reference)] {
        if let Some(set) = set.filter(|s| !s.is_empty() && s.dim() != dim) {
            return Err(PipelineError::Mismatch(format!("{what} are {}-d, config oracle is {dim}-d", set.dim())));
        }
    }
    let e = &cfg.eval;
    let mut m = Metrics { n_samples: samples.len(), ..Default::default() };
    let mut grid = None;
    if dim <= 2 {
        let owned;
        let oracle = match oracle {
            Some(o) => o,
            None => {
                owned = setup_oracle(cfg)?;
                &owned
            }
        };
        let truth = eval::ground_truth_grid(oracle, cfg.train.beta, e.resolution)?;
        m.jsd = Some(eval::sample_jsd(&samples.points, &truth, e.kde_kappa)?);
        grid = Some(eval::kde_torus(&samples.points, e.kde_kappa, e.resolution)?);
    }
    if let Some(r) = reference {
        let (cov, mat) = eval::cov_mat(&samples.points, &r.points, e.delta, eval::toroidal_distance)?;
        m.n_reference = Some(r.len());
        m.cov = Some(cov);
        m.mat = Some(mat);
    }
    if let Some(lp) = &samples.log_pi {
        m.correlation = Some(eval::prob_reward_correlation(lp, &samples.log_reward)?);
    }
    Ok((m, grid))
}

/// Evaluates a sample file, writing `metrics.json` and, for `d ≤ 2`, the
/// sample KDE as `kde_grid.csv`.
pub fn evaluate(cfg: &RunConfig, samples: &Path, reference: Option<&Path>, out: &Path) -> Result<Metrics> {
    let set = SampleSet::load(samples).map_err(PipelineError::Input)?;
    let reference = reference.map(SampleSet::load).transpose().map_err(PipelineError::Input)?;
    let (metrics, grid) = score(cfg, None, &set, reference.as_ref())?;
    if let Some(g) = grid {
        write_grid(&g, &out.join(GRID_FILE))?;
    }
    let report = EvalReport { metrics: metrics.clone(), config: echo(cfg) };
    io::save_tagged(&out.join(METRICS_FILE), io::METRICS_SCHEMA, &report).map_err(PipelineError::Output)?;
    Ok(metrics)
}

fn write_grid(grid: &eval::TorusGrid, path: &Path) -> Result<()> {
    io::write_atomic(path, |w| grid.write_csv(w).map_err(|e| IoError::Malformed(e.to_string()))).map_err(PipelineError::Output)
}

/// Side-by-side summary written by [`compare`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub gflownet: Metrics,
    pub mcmc: Metrics,
    pub mcmc_converged: bool,
    pub mcmc_r_hat: Vec<f64>,
    pub mcmc_chain_length: usize,
    pub final_log_z: f64,
    pub config: RunConfig,
}

/// Trains, runs the MCMC baseline and evaluates both on one configuration.
pub fn compare(cfg: &RunConfig, out: &Path) -> Result<CompareReport> {
    let report = train(cfg, out, None)?;
    let oracle = setup_oracle(cfg)?;
    let n = cfg.eval.n_samples;
    let gfn_set = sample_model(&report.model, &oracle, reward(cfg), n, Some(cfg.eval.likelihood_n), &mut cfg.rng(Stream::Sample))?;
    gfn_set.save(&out.join(SAMPLES_FILE)).map_err(PipelineError::Output)?;

    let mut mcmc_cfg = cfg.clone();
    mcmc_cfg.mcmc.n_samples = n;
    let (mcmc_set, diagnostics) = mcmc_samples(&mcmc_cfg, &oracle)?;
    mcmc_set.save(&out.join(MCMC_SAMPLES_FILE)).map_err(PipelineError::Output)?;

    let (gflownet, gfn_grid) = score(cfg, Some(&oracle), &gfn_set, None)?;
    let (mcmc, mcmc_grid) = score(cfg, Some(&oracle), &mcmc_set, None)?;
    for (grid, name) in [(gfn_grid, "gflownet_grid.csv"), (mcmc_grid, "mcmc_grid.csv")] {
        if let Some(g) = grid {
            write_grid(&g, &out.join(name))?;
        }
    }
    let summary = CompareReport {
        gflownet,
        mcmc,
        mcmc_converged: diagnostics.converged,
        mcmc_r_hat: diagnostics.r_hat.clone(),
        mcmc_chain_length: diagnostics.chain_length,
        final_log_z: report.model.log_z,
        config: echo(cfg),
    };
    io::save_tagged(&out.join(COMPARE_FILE), io::COMPARE_SCHEMA, &summary).map_err(PipelineError::Output)?;
    Ok(summary)
}

/// Points on the ground-truth grid drawn by inverse CDF over cells, each
/// jittered uniformly within its cell.
pub fn sample_grid<R: rand::Rng + ?Sized>(grid: &eval::TorusGrid, n: usize, rng: &mut R) -> Vec<TorusPoint> {
    let cdf: Vec<f64> = grid
        .values()
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let total = cdf.last().copied().unwrap_or(0.0);
    let h = grid.spacing();
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let i = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
            let angles = grid.cell_center(i).into_iter().map(|a| a + (rng.random::<f64>() - 0.5) * h).collect::<Vec<f64>>();
            TorusPoint::new(angles)
        })
        .collect()
}
