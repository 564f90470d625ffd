use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rollout_batch, tb_loss, ExploreMode, GflowNet, ReplayBuffer, Result, TrainConfig, TrainError};
use crate::energy::{NormalizedOracle, RewardParams};
use crate::nn::{clip_global_norm, Adam};

/// Serializable snapshot of the ChaCha8 stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    #[serde(rename = "logZ")]
    pub log_z: f64,
    pub mean_reward: f64,
    pub mean_energy: f64,
}

/// Everything needed to resume training bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub model: GflowNet,
    pub opt_forward: Adam,
    pub opt_backward: Adam,
    pub opt_log_z: Adam,
    pub buffer: ReplayBuffer,
    pub rng: RngState,
    pub iteration: usize,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: GflowNet,
    opt_forward: Adam,
    opt_backward: Adam,
    opt_log_z: Adam,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    /// Fresh model, optimizers and buffer; all randomness flows from `rng`.
    pub fn new<R: Rng + ?Sized>(cfg: TrainConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::from_seed(rng.random());
        let model = GflowNet::new(&cfg.policy, cfg.init_log_z, &mut rng)?;
        Ok(Trainer {
            opt_forward: Adam::new(model.forward.net().n_params(), cfg.lr_policy),
            opt_backward: Adam::new(model.backward.net().n_params(), cfg.lr_policy),
            opt_log_z: Adam::new(1, cfg.lr_log_z),
            buffer: ReplayBuffer::new(cfg.buffer_capacity, cfg.dedup_tolerance),
            model,
            cfg,
            rng,
            iteration: 0,
        })
    }

    pub fn from_state(state: TrainerState) -> Result<Self> {
        state.config.validate()?;
        let sizes = [
            (state.opt_forward.moments().0.len(), state.model.forward.net().n_params()),
            (state.opt_backward.moments().0.len(), state.model.backward.net().n_params()),
            (state.opt_log_z.moments().0.len(), 1),
        ];
        if sizes.iter().any(|(a, b)| a != b) || state.model.forward.config() != &state.config.policy {
            return Err(TrainError::Contract("checkpoint optimizer or policy shapes disagree with its config".into()));
        }
        Ok(Trainer {
            cfg: state.config,
            model: state.model,
            opt_forward: state.opt_forward,
            opt_backward: state.opt_backward,
            opt_log_z: state.opt_log_z,
            buffer: state.buffer,
            rng: state.rng.restore(),
            iteration: state.iteration,
        })
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            config: self.cfg.clone(),
            model: self.model.clone(),
            opt_forward: self.opt_forward.clone(),
            opt_backward: self.opt_backward.clone(),
            opt_log_z: self.opt_log_z.clone(),
            buffer: self.buffer.clone(),
            rng: RngState::capture(&self.rng),
            iteration: self.iteration,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &GflowNet {
        &self.model
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn explore_flags(&mut self) -> Vec<Vec<bool>> {
        let (n, horizon, p) = (self.cfg.on_policy, self.cfg.policy.horizon, self.cfg.explore_prob);
        (0..n)
            .map(|_| match self.cfg.explore_mode {
                ExploreMode::PerTrajectory => vec![self.rng.random_bool(p); horizon],
                ExploreMode::PerStep => (0..horizon).map(|_| self.rng.random_bool(p)).collect(),
            })
            .collect()
    }

    /// One training iteration: rollouts, buffer update, replay draw, TB
    /// loss and one Adam step per parameter group.
    pub fn step(&mut self, oracle: &NormalizedOracle) -> Result<LogRow> {
        let flags = self.explore_flags();
        let reward = RewardParams { beta: self.cfg.beta };
        let fresh = rollout_batch(&self.model, oracle, reward, &flags, &mut self.rng, false)?;
        let n = fresh.len() as f64;
        let mean_reward = fresh.iter().map(|t| t.reward()).sum::<f64>() / n;
        let mean_energy = fresh.iter().map(|t| t.energy).sum::<f64>() / n;

        for t in &fresh {
            self.buffer.insert(t.clone());
        }
        let mut batch = fresh;
        batch.extend(self.buffer.sample(self.cfg.replay, self.cfg.replay_sampling, &mut self.rng));

        let iteration = self.iteration + 1;
        let mut l = tb_loss(&batch, &self.model)?;
        let finite = l.loss.is_finite()
            && l.grad_log_z.is_finite()
            && l.grad_forward.iter().chain(&l.grad_backward).all(|g| g.is_finite());
        if !finite {
            return Err(TrainError::NonFinite { iteration, last_good: Box::new(self.state()) });
        }
        if self.cfg.grad_clip > 0.0 {
            clip_global_norm(&mut [&mut l.grad_forward, &mut l.grad_backward], self.cfg.grad_clip);
        }
        let log_z = self.model.log_z;
        self.opt_forward.step(self.model.forward.net_mut().params_mut(), &l.grad_forward)?;
        self.opt_backward.step(self.model.backward.net_mut().params_mut(), &l.grad_backward)?;
        let mut z = [self.model.log_z];
        self.opt_log_z.step(&mut z, &[l.grad_log_z])?;
        self.model.log_z = z[0];
        self.iteration = iteration;
        Ok(LogRow { iteration, loss: l.loss, log_z, mean_reward, mean_energy })
    }

    /// Runs until `cfg.iterations` have been completed, calling `hook` after
    /// every iteration.
    pub fn run<F>(&mut self, oracle: &NormalizedOracle, mut hook: F) -> Result<Vec<LogRow>>
    where
        F: FnMut(&Trainer, &LogRow) -> Result<()>,
    {
        let mut log = Vec::with_capacity(self.cfg.iterations.saturating_sub(self.iteration));
        while self.iteration < self.cfg.iterations {
            let row = self.step(oracle)?;
            hook(self, &row)?;
            log.push(row);
        }
        Ok(log)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GflowNet,
    pub log: Vec<LogRow>,
    pub state: TrainerState,
}

/// Trains a fresh model for `cfg.iterations` iterations.
pub fn train<R: Rng + ?Sized>(cfg: &TrainConfig, oracle: &NormalizedOracle, rng: &mut R) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), rng)?;
    let log = trainer.run(oracle, |_, _| Ok(()))?;
    let state = trainer.state();
    Ok(TrainOutcome { model: state.model.clone(), log, state })
}
