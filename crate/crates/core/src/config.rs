//! Run configuration.
//!
//! Accepted either as JSON or as flat `dotted.key = value` lines, where each
//! value is JSON (bare words are taken as strings):
//!
//! ```text
//! seed = 7
//! oracle.kind = cross_coupled
//! oracle.dimension = 6
//! train.iterations = 20000
//! train.policy.hidden = [128, 128, 128]
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::energy::{AnalyticPotential, EnergyError, EnergyOracle, ExternalOracle, NormalizedOracle};
use crate::eval::{DEFAULT_KDE_KAPPA, DEFAULT_RESOLUTION};
use crate::gfn::TrainConfig;
use crate::mcmc::McmcConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Where energies come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    #[default]
    #[serde(rename = "four_mode_2d")]
    FourMode2d,
    #[serde(rename = "two_mode_1d")]
    TwoMode1d,
    Butane { dimension: usize },
    CrossCoupled { dimension: usize, seed: u64 },
    /// Any analytic potential spelled out in full.
    Analytic { potential: AnalyticPotential },
    External {
        command: String,
        dimension: usize,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: f64,
    },
}

fn default_timeout_secs() -> f64 {
    crate::energy::external::DEFAULT_TIMEOUT.as_secs_f64()
}

impl OracleSpec {
    pub fn dimension(&self) -> usize {
        match self {
            OracleSpec::FourMode2d => 2,
            OracleSpec::TwoMode1d => 1,
            OracleSpec::Butane { dimension }
            | OracleSpec::CrossCoupled { dimension, .. }
            | OracleSpec::External { dimension, .. } => *dimension,
            OracleSpec::Analytic { potential } => potential.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension() == 0 {
            return Err(ConfigError::Invalid("oracle dimension must be positive".into()));
        }
        match self {
            OracleSpec::Analytic { potential } => {
                potential.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
            }
            OracleSpec::External { command, timeout_secs, .. } => {
                if command.trim().is_empty() {
                    return Err(ConfigError::Invalid("oracle.command is empty".into()));
                }
                if !(*timeout_secs > 0.0 && timeout_secs.is_finite()) {
                    return Err(ConfigError::Invalid("oracle.timeout_secs must be positive".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Builds the raw oracle; external commands are spawned here.
    pub fn build(&self) -> std::result::Result<Box<dyn EnergyOracle>, EnergyError> {
        Ok(match self {
            OracleSpec::FourMode2d => Box::new(AnalyticPotential::four_mode_2d()),
            OracleSpec::TwoMode1d => Box::new(AnalyticPotential::two_mode_1d()),
            OracleSpec::Butane { dimension } => Box::new(AnalyticPotential::butane(*dimension)),
            OracleSpec::CrossCoupled { dimension, seed } => Box::new(AnalyticPotential::cross_coupled(*dimension, *seed)),
            OracleSpec::Analytic { potential } => Box::new(potential.clone()),
            OracleSpec::External { command, dimension, timeout_secs } => Box::new(ExternalOracle::connect_with_timeout(
                command,
                *dimension,
                Duration::from_secs_f64(*timeout_secs),
            )?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    pub n: usize,
    pub q_lo: f64,
    pub q_hi: f64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec { n: 10_000, q_lo: 0.01, q_hi: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Grid cells per axis.
    pub resolution: usize,
    pub kde_kappa: f64,
    /// COV threshold in radians of toroidal RMSD.
    pub delta: f64,
    /// Backward trajectories per likelihood estimate.
    pub likelihood_n: usize,
    /// Samples drawn from the trained model by `compare`.
    pub n_samples: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec { resolution: DEFAULT_RESOLUTION, kde_kappa: DEFAULT_KDE_KAPPA, delta: 0.5, likelihood_n: 64, n_samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub oracle: OracleSpec,
    pub calibration: CalibrationSpec,
    pub train: TrainConfig,
    pub mcmc: McmcConfig,
    pub eval: EvalSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            oracle: OracleSpec::default(),
            calibration: CalibrationSpec::default(),
            train: TrainConfig::default(),
            mcmc: McmcConfig::default(),
            eval: EvalSpec::default(),
        }
    }
}

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Calibration = 1,
    Train = 2,
    Mcmc = 3,
    Sample = 4,
    Eval = 5,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax { line: e.line(), message: e.to_string() })?;
        Self::from_value(v)
    }

    /// Parses flat `key = value` text. Blank lines and `#` comments are skipped.
    pub fn from_flat(text: &str) -> Result<Self> {
        let mut root = Map::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |message: String| ConfigError::Syntax { line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| syntax(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            if key.is_empty() || key.split('.').any(|p| p.is_empty()) {
                return Err(syntax(format!("malformed key {key:?}")));
            }
            let value = value.trim();
            let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for p in &parts[..parts.len() - 1] {
                let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
                node = entry.as_object_mut().ok_or_else(|| syntax(format!("{p} is both a value and a section")))?;
            }
            if node.insert(parts[parts.len() - 1].to_string(), parsed).is_some() {
                return Err(syntax(format!("duplicate key {key}")));
            }
        }
        Self::from_value(Value::Object(root))
    }

    /// Loads JSON when the text starts with `{`, flat key-value otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Self::from_json(text)
        } else {
            Self::from_flat(text)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    fn from_value(v: Value) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_value(v).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        // the policy always acts on the oracle's torus
        cfg.train.policy.dim = cfg.oracle.dimension();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        if self.train.policy.dim != self.oracle.dimension() {
            return Err(ConfigError::Invalid(format!(
                "policy dimension {} differs from oracle dimension {}",
                self.train.policy.dim,
                self.oracle.dimension()
            )));
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.mcmc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let c = &self.calibration;
        if c.n < 100 || !(0.0 <= c.q_lo && c.q_lo < c.q_hi && c.q_hi <= 1.0) {
            return Err(ConfigError::Invalid("calibration needs n ≥ 100 and 0 ≤ q_lo < q_hi ≤ 1".into()));
        }
        let e = &self.eval;
        if e.resolution < 2 || !(e.kde_kappa > 0.0) || !(e.delta > 0.0) || e.likelihood_n == 0 {
            return Err(ConfigError::Invalid("eval needs resolution ≥ 2 and positive kde_kappa, delta, likelihood_n".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// One `key = value` line per leaf, in a stable order.
    pub fn to_flat(&self) -> String {
        fn walk(prefix: &str, v: &Value, out: &mut String) {
            match v {
                Value::Object(m) if !m.is_empty() => {
                    for (k, child) in m {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                _ => {
                    out.push_str(prefix);
                    out.push_str(" = ");
                    out.push_str(&v.to_string());
                    out.push('\n');
                }
            }
        }
        let mut out = String::new();
        walk("", &serde_json::to_value(self).expect("config serialises"), &mut out);
        out
    }

    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        rng
    }

    /// Builds and calibrates the configured oracle.
    pub fn oracle(&self) -> std::result::Result<NormalizedOracle, EnergyError> {
        let c = &self.calibration;
        NormalizedOracle::calibrate(self.oracle.build()?, c.n, c.q_lo, c.q_hi, &mut self.rng(Stream::Calibration))
    }
}
