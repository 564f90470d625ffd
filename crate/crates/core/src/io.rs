//! Versioned file formats.
//!
//! CSV outputs start with a `#schema=<name>/<version>` line followed by a
//! header row. JSON outputs carry a `schema` (or, for checkpoints, a
//! `format` plus `version`) field. Readers reject unknown schemas.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::OracleSpec;
use crate::energy::Calibration;
use crate::gfn::{LogRow, TrainerState};
use crate::torus::TorusPoint;

pub const SAMPLES_SCHEMA: &str = "torsionflow.samples/1";
pub const TRAIN_LOG_SCHEMA: &str = "torsionflow.trainlog/1";
pub const METRICS_SCHEMA: &str = "torsionflow.metrics/1";
pub const MCMC_SCHEMA: &str = "torsionflow.mcmc/1";
pub const COMPARE_SCHEMA: &str = "torsionflow.compare/1";
pub const CHECKPOINT_FORMAT: &str = "torsionflow.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema {found:?}, expected {expected:?}")]
    Schema { found: String, expected: String },
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("malformed file: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| IoError::Io { path: path.into(), source })
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let io_err = |source| IoError::Io { path: path.into(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let file = File::create(&tmp).map_err(|source| IoError::Io { path: tmp.clone(), source })?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)
}

fn read_schema_line<R: BufRead>(r: &mut R, expected: &str) -> Result<()> {
    let mut first = String::new();
    r.read_line(&mut first).map_err(|e| IoError::Malformed(e.to_string()))?;
    let found = first.trim().strip_prefix("#schema=").unwrap_or(first.trim()).to_string();
    if found != expected {
        return Err(IoError::Schema { found, expected: expected.into() });
    }
    Ok(())
}

/// Terminal points with their energies, log-rewards and optionally
/// estimated log-likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Vec<TorusPoint>,
    pub energy: Vec<f64>,
    pub log_reward: Vec<f64>,
    pub log_pi: Option<Vec<f64>>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.dim())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#schema={SAMPLES_SCHEMA}").map_err(|e| IoError::Malformed(e.to_string()))?;
        let mut wtr = csv::Writer::from_writer(w);
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("theta_{j}")).collect();
        header.extend(["energy".to_string(), "log_reward".to_string()]);
        if self.log_pi.is_some() {
            header.push("log_pi".into());
        }
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.points[i].angles().iter().map(f64::to_string).collect();
            row.push(self.energy[i].to_string());
            row.push(self.log_reward[i].to_string());
            if let Some(lp) = &self.log_pi {
                row.push(lp[i].to_string());
            }
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        read_schema_line(&mut r, SAMPLES_SCHEMA)?;
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let mut thetas = Vec::new();
        while let Some(c) = col(&format!("theta_{}", thetas.len())) {
            thetas.push(c);
        }
        if thetas.is_empty() {
            return Err(IoError::MissingColumn("theta_0".into()));
        }
        let energy = col("energy").ok_or_else(|| IoError::MissingColumn("energy".into()))?;
        let log_reward = col("log_reward").ok_or_else(|| IoError::MissingColumn("log_reward".into()))?;
        let log_pi = col("log_pi");
        let mut set = SampleSet { points: Vec::new(), energy: Vec::new(), log_reward: Vec::new(), log_pi: log_pi.map(|_| Vec::new()) };
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| !v.is_nan())
                    .ok_or_else(|| IoError::Malformed(format!("row {}: bad value in column {}", line + 1, headers.get(c).unwrap_or("?"))))
            };
            let angles = thetas.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
            set.points.push(TorusPoint::new(angles));
            set.energy.push(num(energy)?);
            set.log_reward.push(num(log_reward)?);
            if let (Some(c), Some(v)) = (log_pi, set.log_pi.as_mut()) {
                v.push(num(c)?);
            }
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| self.write(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(open(path)?)
    }
}

pub fn write_train_log<W: Write>(rows: &[LogRow], mut w: W) -> Result<()> {
    writeln!(w, "#schema={TRAIN_LOG_SCHEMA}").map_err(|e| IoError::Malformed(e.to_string()))?;
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    if rows.is_empty() {
        wtr.write_record(["iteration", "loss", "logZ", "mean_reward", "mean_energy"])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_train_log<R: Read>(r: R) -> Result<Vec<LogRow>> {
    let mut r = BufReader::new(r);
    read_schema_line(&mut r, TRAIN_LOG_SCHEMA)?;
    csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(IoError::from)).collect()
}

/// Everything needed to resume training or to sample from a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub oracle: OracleSpec,
    pub calibration: Calibration,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn new(oracle: OracleSpec, calibration: Calibration, state: TrainerState) -> Self {
        Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, oracle, calibration, state }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| Ok(serde_json::to_writer(w, self)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_reader(open(path)?)?;
        let format = v.get("format").and_then(|f| f.as_str()).unwrap_or_default();
        let version = v.get("version").and_then(|f| f.as_u64()).unwrap_or_default();
        if format != CHECKPOINT_FORMAT || version != CHECKPOINT_VERSION as u64 {
            return Err(IoError::Schema {
                found: format!("{format}/{version}"),
                expected: format!("{CHECKPOINT_FORMAT}/{CHECKPOINT_VERSION}"),
            });
        }
        Ok(serde_json::from_value(v)?)
    }
}

/// A JSON document tagged with its schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tagged<T> {
    pub schema: String,
    #[serde(flatten)]
    pub body: T,
}

pub fn save_tagged<T: Serialize>(path: &Path, schema: &str, body: &T) -> Result<()> {
    let doc = Tagged { schema: schema.to_string(), body };
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, &doc)?;
        w.write_all(b"\n").map_err(|e| IoError::Malformed(e.to_string()))
    })
}

pub fn load_tagged<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<T> {
    let doc: Tagged<T> = serde_json::from_reader(open(path)?)?;
    if doc.schema != schema {
        return Err(IoError::Schema { found: doc.schema, expected: schema.into() });
    }
    Ok(doc.body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(with_pi: bool) -> SampleSet {
        SampleSet {
            points: vec![TorusPoint::new(vec![0.1, 6.2]), TorusPoint::new(vec![3.0, 1.0 / 3.0])],
            energy: vec![-1.5, 2.25e-7],
            log_reward: vec![-0.0, -31.999],
            log_pi: with_pi.then(|| vec![-2.0, -7.125]),
        }
    }

    #[test]
    fn samples_round_trip() {
        for with_pi in [false, true] {
            let s = set(with_pi);
            let mut buf = Vec::new();
            s.write(&mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert!(text.starts_with("#schema=torsionflow.samples/1\ntheta_0,theta_1,energy,log_reward"));
            assert_eq!(SampleSet::read(&buf[..]).unwrap(), s);
        }
    }

    #[test]
    fn unknown_schema_rejected() {
        let text = "#schema=torsionflow.samples/9\ntheta_0,energy,log_reward\n1,2,3\n";
        assert!(matches!(SampleSet::read(text.as_bytes()), Err(IoError::Schema { .. })));
        let text = "theta_0,energy,log_reward\n1,2,3\n";
        assert!(matches!(SampleSet::read(text.as_bytes()), Err(IoError::Schema { .. })));
    }

    #[test]
    fn missing_columns_reported() {
        let text = "#schema=torsionflow.samples/1\ntheta_0,log_reward\n1,3\n";
        assert!(matches!(SampleSet::read(text.as_bytes()), Err(IoError::MissingColumn(c)) if c == "energy"));
        let text = "#schema=torsionflow.samples/1\nenergy,log_reward\n1,3\n";
        assert!(matches!(SampleSet::read(text.as_bytes()), Err(IoError::MissingColumn(_))));
        let text = "#schema=torsionflow.samples/1\ntheta_0,energy,log_reward\n1,x,3\n";
        assert!(matches!(SampleSet::read(text.as_bytes()), Err(IoError::Malformed(_))));
    }

    #[test]
    fn train_log_round_trips() {
        let rows = vec![
            LogRow { iteration: 1, loss: 2.5, log_z: -0.1, mean_reward: 0.3, mean_energy: 1.0 / 7.0 },
            LogRow { iteration: 2, loss: 1.25, log_z: 0.2, mean_reward: 0.4, mean_energy: -3.0 },
        ];
        let mut buf = Vec::new();
        write_train_log(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "iteration,loss,logZ,mean_reward,mean_energy");
        assert_eq!(read_train_log(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn tagged_json_checks_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_tagged(&p, METRICS_SCHEMA, &serde_json::json!({"jsd": 0.01})).unwrap();
        let v: serde_json::Value = load_tagged(&p, METRICS_SCHEMA).unwrap();
        assert_eq!(v["jsd"], 0.01);
        assert!(load_tagged::<serde_json::Value>(&p, MCMC_SCHEMA).is_err());
    }
}
