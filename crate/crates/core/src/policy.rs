//! Forward and backward policies over trajectory states on the hyper-torus.
//!
//! A policy network maps an encoded [`TrajectoryState`] to, for every angle,
//! a von Mises mixture over the next angular increment. The raw network row
//! for dimension `j` is laid out as `[logits; K][locations; K][raw κ; K]`,
//! and the effective concentration is `κ_min + softplus(raw)`, capped at
//! `κ_max`.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Matrix, Mlp, NnError, Tape};
use crate::torus::{wrap_signed, TorusPoint};
use crate::vonmises::{VonMisesError, VonMisesMixture};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("network produced a non-finite value at output {index} (state step {step})")]
    NonFiniteOutput { index: usize, step: usize },
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Distribution(#[from] VonMisesError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Shape and parameterisation shared by the forward and backward policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub dim: usize,
    /// Trajectory length `T`.
    pub horizon: usize,
    pub n_components: usize,
    pub n_freq: usize,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            dim: 2,
            horizon: 5,
            n_components: 5,
            n_freq: 5,
            kappa_min: 4.0,
            kappa_max: 500.0,
            hidden: vec![128, 128, 128],
            leaky_slope: 0.01,
        }
    }
}

impl PolicyConfig {
    pub fn input_dim(&self) -> usize {
        self.dim * 2 * self.n_freq + self.horizon + 1
    }

    pub fn output_dim(&self) -> usize {
        self.dim * 3 * self.n_components
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim());
        w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PolicyError::Contract(m.to_string()));
        if self.dim == 0 || self.horizon == 0 || self.n_components == 0 || self.n_freq == 0 {
            return bad("dim, horizon, n_components and n_freq must be positive");
        }
        if !(self.kappa_min > 0.0 && self.kappa_max >= self.kappa_min && self.kappa_max.is_finite()) {
            return bad("need 0 < kappa_min <= kappa_max < inf");
        }
        Ok(())
    }
}

/// A state `s_t`: a torus point plus the step index. Step 0 is the unique
/// source state, which carries the zero point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    point: TorusPoint,
    step: usize,
}

impl TrajectoryState {
    pub fn source(dim: usize) -> Self {
        TrajectoryState { point: TorusPoint::zeros(dim), step: 0 }
    }

    pub fn new(point: TorusPoint, step: usize) -> Result<Self> {
        if step == 0 {
            return Err(PolicyError::Contract("step 0 is reserved for the source state".into()));
        }
        Ok(TrajectoryState { point, step })
    }

    pub fn point(&self) -> &TorusPoint {
        &self.point
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_source(&self) -> bool {
        self.step == 0
    }

    /// The state reached by adding `increment`.
    pub fn advance(&self, increment: &[f64]) -> TrajectoryState {
        TrajectoryState { point: self.point.shifted(increment), step: self.step + 1 }
    }
}

/// Trigonometric features `[sin kθ, cos kθ]_{k=1..n_freq}` per angle,
/// followed by a one-hot of the step index (length `horizon + 1`).
pub fn encode_state(state: &TrajectoryState, n_freq: usize, horizon: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(state.point.dim() * 2 * n_freq + horizon + 1);
    encode_into(state, n_freq, horizon, &mut out);
    out
}

fn encode_into(state: &TrajectoryState, n_freq: usize, horizon: usize, out: &mut Vec<f64>) {
    for &theta in state.point.angles() {
        for k in 1..=n_freq {
            let (s, c) = (k as f64 * theta).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    let start = out.len();
    out.resize(start + horizon + 1, 0.0);
    out[start + state.step.min(horizon)] = 1.0;
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-dimension mixtures decoded from one network output row.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    mixtures: Vec<VonMisesMixture>,
    // dκ/draw per (dim, component), zero where κ_max clips
    kappa_slopes: Vec<f64>,
    n_components: usize,
}

impl PolicyOutput {
    pub fn from_raw(raw: &[f64], cfg: &PolicyConfig) -> Result<Self> {
        let k = cfg.n_components;
        if raw.len() != cfg.output_dim() {
            return Err(PolicyError::Contract(format!(
                "raw output has {} values, expected {}",
                raw.len(),
                cfg.output_dim()
            )));
        }
        if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteOutput { index, step: usize::MAX });
        }
        let mut mixtures = Vec::with_capacity(cfg.dim);
        let mut kappa_slopes = Vec::with_capacity(cfg.dim * k);
        let mut kappas = vec![0.0; k];
        for block in raw.chunks_exact(3 * k) {
            let (logits, rest) = block.split_at(k);
            let (locs, raw_kappa) = rest.split_at(k);
            for (kap, &r) in kappas.iter_mut().zip(raw_kappa) {
                let unclipped = cfg.kappa_min + softplus(r);
                if unclipped >= cfg.kappa_max {
                    *kap = cfg.kappa_max;
                    kappa_slopes.push(0.0);
                } else {
                    *kap = unclipped;
                    kappa_slopes.push(sigmoid(r));
                }
            }
            mixtures.push(VonMisesMixture::from_logits(logits, locs, &kappas)?);
        }
        Ok(PolicyOutput { mixtures, kappa_slopes, n_components: k })
    }

    pub fn dim(&self) -> usize {
        self.mixtures.len()
    }

    pub fn mixture(&self, dim: usize) -> &VonMisesMixture {
        &self.mixtures[dim]
    }

    /// Joint log-density of an increment (dimensions independent).
    pub fn log_pdf(&self, increment: &[f64]) -> f64 {
        self.mixtures.iter().zip(increment).map(|(m, &x)| m.log_pdf(x)).sum()
    }

    /// Joint log-density; adds `scale · ∂(log p)/∂raw` into `raw_grad`.
    pub fn log_pdf_accumulate_grad(&self, increment: &[f64], scale: f64, raw_grad: &mut [f64]) -> f64 {
        let k = self.n_components;
        let mut total = 0.0;
        for (j, (m, &x)) in self.mixtures.iter().zip(increment).enumerate() {
            let (lp, g) = m.log_pdf_with_grad(x);
            total += lp;
            let block = &mut raw_grad[j * 3 * k..(j + 1) * 3 * k];
            for c in 0..k {
                block[c] += scale * g.logits[c];
                block[k + c] += scale * g.locs[c];
                block[2 * k + c] += scale * g.kappas[c] * self.kappa_slopes[j * k + c];
            }
        }
        total
    }

    /// Samples one increment per dimension, each in `[-π, π)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mixtures.iter().map(|m| m.sample(rng)).collect()
    }
}

/// Log-density of angle `x` under the mixture of dimension `dim`.
pub fn mixture_log_pdf(x: f64, out: &PolicyOutput, dim: usize) -> f64 {
    out.mixture(dim).log_pdf(x)
}

/// A sampled increment with its exact joint log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    pub increment: Vec<f64>,
    pub log_density: f64,
}

/// A policy network together with its decoding configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    cfg: PolicyConfig,
    net: Mlp,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(cfg: PolicyConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let net = Mlp::new(&cfg.widths(), cfg.leaky_slope, rng)?;
        Ok(Policy { cfg, net })
    }

    pub fn from_net(cfg: PolicyConfig, net: Mlp) -> Result<Self> {
        cfg.validate()?;
        if net.widths() != cfg.widths().as_slice() {
            return Err(PolicyError::Contract(format!(
                "network widths {:?} do not match policy widths {:?}",
                net.widths(),
                cfg.widths()
            )));
        }
        Ok(Policy { cfg, net })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn encode_batch(&self, states: &[&TrajectoryState]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(states.len() * self.cfg.input_dim());
        for s in states {
            if s.point.dim() != self.cfg.dim {
                return Err(PolicyError::Contract(format!(
                    "state has dimension {}, policy expects {}",
                    s.point.dim(),
                    self.cfg.dim
                )));
            }
            encode_into(s, self.cfg.n_freq, self.cfg.horizon, &mut data);
        }
        Ok(Matrix::from_vec(states.len(), self.cfg.input_dim(), data)?)
    }

    fn decode(&self, raw: &Matrix, states: &[&TrajectoryState]) -> Result<Vec<PolicyOutput>> {
        (0..raw.rows())
            .map(|r| {
                PolicyOutput::from_raw(raw.row(r), &self.cfg).map_err(|e| match e {
                    PolicyError::NonFiniteOutput { index, .. } => {
                        PolicyError::NonFiniteOutput { index, step: states[r].step }
                    }
                    other => other,
                })
            })
            .collect()
    }

    /// Decoded mixtures for a batch of states (no gradient record).
    pub fn outputs(&self, states: &[&TrajectoryState]) -> Result<Vec<PolicyOutput>> {
        let x = self.encode_batch(states)?;
        let raw = self.net.predict(&x)?;
        self.decode(&raw, states)
    }

    /// Decoded mixtures plus the tape needed to backpropagate through them.
    pub fn outputs_with_tape(&self, states: &[&TrajectoryState]) -> Result<(Vec<PolicyOutput>, Tape)> {
        let x = self.encode_batch(states)?;
        let (raw, tape) = self.net.forward(&x)?;
        Ok((self.decode(&raw, states)?, tape))
    }

    pub fn output(&self, state: &TrajectoryState) -> Result<PolicyOutput> {
        Ok(self.outputs(&[state])?.pop().unwrap())
    }
}

/// Samples one forward step from `state`.
pub fn policy_step<R: Rng + ?Sized>(policy: &Policy, state: &TrajectoryState, rng: &mut R) -> Result<StepSample> {
    if state.step >= policy.cfg.horizon {
        return Err(PolicyError::Contract(format!(
            "state at step {} cannot move forward with horizon {}",
            state.step, policy.cfg.horizon
        )));
    }
    let out = policy.output(state)?;
    let increment = out.sample(rng);
    let log_density = out.log_pdf(&increment);
    Ok(StepSample { increment, log_density })
}

/// Draws a uniform increment in `[-π, π)^d`.
pub fn uniform_increment<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| wrap_signed(rng.random::<f64>() * TAU)).collect()
}

/// `log p_B(state_prev | state_t)`. The step back to the source is
/// deterministic and contributes zero.
pub fn backward_step_log_pdf(
    backward: &Policy,
    state_t: &TrajectoryState,
    state_prev: &TrajectoryState,
) -> Result<f64> {
    if state_t.step == 0 || state_prev.step + 1 != state_t.step {
        return Err(PolicyError::Contract(format!(
            "backward transition from step {} to step {}",
            state_t.step, state_prev.step
        )));
    }
    if state_t.step == 1 {
        return Ok(0.0);
    }
    let decrement = state_t.point.signed_diff(&state_prev.point);
    Ok(backward.output(state_t)?.log_pdf(&decrement))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn small_cfg(dim: usize) -> PolicyConfig {
        PolicyConfig { dim, horizon: 3, hidden: vec![16, 16], ..Default::default() }
    }

    #[test]
    fn encoding_zero_and_pi() {
        let s = TrajectoryState::new(TorusPoint::new(vec![0.0]), 1).unwrap();
        let e = encode_state(&s, 5, 3);
        assert_eq!(&e[..10], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(&e[10..], &[0.0, 1.0, 0.0, 0.0]);
        let s = TrajectoryState::new(TorusPoint::new(vec![PI]), 2).unwrap();
        let e = encode_state(&s, 2, 2);
        let want = [0.0, -1.0, 0.0, 1.0];
        for (a, b) in e[..4].iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn encoding_direct_trig() {
        let theta = 1.2345;
        let s = TrajectoryState::new(TorusPoint::new(vec![theta]), 1).unwrap();
        let e = encode_state(&s, 5, 5);
        for k in 1..=5 {
            assert_eq!(e[2 * (k - 1)], (k as f64 * theta).sin());
            assert_eq!(e[2 * (k - 1) + 1], (k as f64 * theta).cos());
        }
    }

    #[test]
    fn encoding_wrap_invariant() {
        let a = TrajectoryState::new(TorusPoint::new(vec![0.7, 5.0]), 2).unwrap();
        let b = TrajectoryState::new(TorusPoint::new(vec![0.7 + TAU, 5.0 - TAU]), 2).unwrap();
        let (ea, eb) = (encode_state(&a, 5, 5), encode_state(&b, 5, 5));
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn source_state_rules() {
        assert!(TrajectoryState::source(3).is_source());
        assert!(TrajectoryState::new(TorusPoint::zeros(2), 0).is_err());
    }

    #[test]
    fn kappa_floor_under_adversarial_raw() {
        let cfg = PolicyConfig { dim: 1, n_components: 4, ..Default::default() };
        let raw = [0.0, 1.0, -3.0, 2.0, 0.0, 1.0, 2.0, 3.0, -1e6, -50.0, 1e6, 0.0];
        let out = PolicyOutput::from_raw(&raw, &cfg).unwrap();
        for c in out.mixture(0).components() {
            assert!(c.kappa() >= 4.0 && c.kappa() <= 500.0);
        }
        let w: f64 = out.mixture(0).weights().sum();
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_output_rejected() {
        let cfg = PolicyConfig { dim: 1, n_components: 1, ..Default::default() };
        assert!(matches!(
            PolicyOutput::from_raw(&[0.0, f64::NAN, 0.0], &cfg),
            Err(PolicyError::NonFiniteOutput { index: 1, .. })
        ));
    }

    #[test]
    fn step_log_density_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Policy::new(small_cfg(2), &mut rng).unwrap();
        let s = TrajectoryState::source(2);
        for _ in 0..20 {
            let st = policy_step(&p, &s, &mut rng).unwrap();
            let out = p.output(&s).unwrap();
            let direct = mixture_log_pdf(st.increment[0], &out, 0) + mixture_log_pdf(st.increment[1], &out, 1);
            assert!((st.log_density - direct).abs() < 1e-12);
            assert!(st.increment.iter().all(|x| (-PI..PI).contains(x)));
        }
        let terminal = TrajectoryState::new(TorusPoint::zeros(2), 3).unwrap();
        assert!(policy_step(&p, &terminal, &mut rng).is_err());
    }

    #[test]
    fn backward_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Policy::new(small_cfg(2), &mut rng).unwrap();
        let s1 = TrajectoryState::new(TorusPoint::new(vec![1.0, 2.0]), 1).unwrap();
        let s2 = TrajectoryState::new(TorusPoint::new(vec![6.0, 0.5]), 2).unwrap();
        assert_eq!(backward_step_log_pdf(&b, &s1, &TrajectoryState::source(2)).unwrap(), 0.0);
        let v = backward_step_log_pdf(&b, &s2, &s1).unwrap();
        let out = b.output(&s2).unwrap();
        let want = mixture_log_pdf(wrap_signed(6.0 - 1.0), &out, 0) + mixture_log_pdf(wrap_signed(0.5 - 2.0), &out, 1);
        assert!(v.is_finite());
        assert!((v - want).abs() < 1e-12);
        assert!(backward_step_log_pdf(&b, &s2, &TrajectoryState::source(2)).is_err());
    }

    #[test]
    fn raw_grad_finite_difference() {
        let cfg = PolicyConfig { dim: 2, n_components: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let raw: Vec<f64> = (0..cfg.output_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let inc = [0.4, -2.2];
        let out = PolicyOutput::from_raw(&raw, &cfg).unwrap();
        let mut g = vec![0.0; raw.len()];
        out.log_pdf_accumulate_grad(&inc, 1.0, &mut g);
        let h = 1e-6;
        for i in 0..raw.len() {
            let mut a = raw.clone();
            let mut b = raw.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (PolicyOutput::from_raw(&a, &cfg).unwrap().log_pdf(&inc)
                - PolicyOutput::from_raw(&b, &cfg).unwrap().log_pdf(&inc))
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "{i}: {fd} vs {}", g[i]);
        }
    }
}
