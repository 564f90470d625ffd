//! Energy normalisation with quantile clamping.
//!
//! Raw energies are clamped at empirical quantiles of a uniform calibration
//! sample and mapped affinely so the clamp bounds become 0 and 1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnergyError, EnergyOracle, Result};
use crate::torus::TorusPoint;

/// Frozen calibration statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub n: usize,
    pub q_lo: f64,
    pub q_hi: f64,
    /// Raw energy mapped to 0.
    pub e_lo: f64,
    /// Raw energy mapped to 1.
    pub e_hi: f64,
    pub observed_min: f64,
    pub observed_max: f64,
}

impl Calibration {
    #[inline]
    pub fn normalize(&self, e: f64) -> f64 {
        ((e - self.e_lo) / (self.e_hi - self.e_lo)).clamp(0.0, 1.0)
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// An oracle whose outputs are normalised to `[0, 1]`.
pub struct NormalizedOracle {
    inner: Box<dyn EnergyOracle>,
    calibration: Calibration,
}

impl std::fmt::Debug for NormalizedOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NormalizedOracle")
            .field("inner", &self.inner.name())
            .field("calibration", &self.calibration)
            .finish()
    }
}

/// Calibrates with the default quantile bounds (1st and 99th percentile).
pub fn calibrate<R: Rng + ?Sized>(oracle: Box<dyn EnergyOracle>, n: usize, rng: &mut R) -> Result<NormalizedOracle> {
    NormalizedOracle::calibrate(oracle, n, 0.01, 0.99, rng)
}

impl NormalizedOracle {
    pub fn calibrate<R: Rng + ?Sized>(
        oracle: Box<dyn EnergyOracle>,
        n: usize,
        q_lo: f64,
        q_hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n < 100 {
            return Err(EnergyError::Calibration(format!("need at least 100 calibration points, got {n}")));
        }
        if !(0.0..1.0).contains(&q_lo) || !(q_lo < q_hi && q_hi <= 1.0) {
            return Err(EnergyError::Calibration(format!("bad quantile bounds ({q_lo}, {q_hi})")));
        }
        let d = oracle.dimension();
        let points: Vec<TorusPoint> = (0..n).map(|_| TorusPoint::uniform(d, rng)).collect();
        let mut energies = oracle.evaluate_batch(&points)?;
        energies.sort_by(f64::total_cmp);
        let e_lo = quantile_sorted(&energies, q_lo);
        let e_hi = quantile_sorted(&energies, q_hi);
        if !(e_hi - e_lo >= 1e-12) {
            return Err(EnergyError::Calibration(format!("degenerate energy range [{e_lo}, {e_hi}]")));
        }
        let calibration = Calibration {
            n,
            q_lo,
            q_hi,
            e_lo,
            e_hi,
            observed_min: energies[0],
            observed_max: energies[n - 1],
        };
        Ok(NormalizedOracle { inner: oracle, calibration })
    }

    /// Reattaches stored statistics to an oracle without recalibrating.
    pub fn from_calibration(oracle: Box<dyn EnergyOracle>, calibration: Calibration) -> Result<Self> {
        if !(calibration.e_hi - calibration.e_lo >= 1e-12) {
            return Err(EnergyError::Calibration("stored range is degenerate".into()));
        }
        Ok(NormalizedOracle { inner: oracle, calibration })
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calibration
    }

    pub fn inner(&self) -> &dyn EnergyOracle {
        self.inner.as_ref()
    }

    pub fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    /// Raw and normalised energies for a batch.
    pub fn evaluate(&self, points: &[TorusPoint]) -> Result<(Vec<f64>, Vec<f64>)> {
        let raw = self.inner.evaluate_batch(points)?;
        if raw.len() != points.len() {
            return Err(EnergyError::Protocol(format!("{} energies for {} points", raw.len(), points.len())));
        }
        let norm = raw.iter().map(|&e| self.calibration.normalize(e)).collect();
        Ok((raw, norm))
    }

    pub fn evaluate_normalized(&self, points: &[TorusPoint]) -> Result<Vec<f64>> {
        Ok(self.evaluate(points)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::potential::{AnalyticPotential, CosineTerm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cosine_1d() -> Box<dyn EnergyOracle> {
        Box::new(AnalyticPotential::CrossCoupled {
            terms: vec![vec![CosineTerm { n: 1, amplitude: 1.0, phase: 0.0 }]],
            couplings: vec![],
        })
    }

    #[test]
    fn constant_oracle_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Box::new(AnalyticPotential::Constant { dimension: 1, value: 2.0 });
        assert!(matches!(calibrate(c, 1000, &mut rng), Err(EnergyError::Calibration(_))));
        let c = Box::new(AnalyticPotential::Constant { dimension: 1, value: 2.0 });
        assert!(calibrate(c, 10, &mut rng).is_err());
    }

    #[test]
    fn clamp_fractions_on_calibration_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let norm = calibrate(cosine_1d(), n, &mut rng).unwrap();
        // same seed reproduces the calibration sample
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..n).map(|_| TorusPoint::uniform(1, &mut rng)).collect();
        let e = norm.evaluate_normalized(&pts).unwrap();
        assert!(e.iter().all(|v| (0.0..=1.0).contains(v)));
        let at0 = e.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        let at1 = e.iter().filter(|&&v| v == 1.0).count() as f64 / n as f64;
        // 1% ± multinomial noise (3σ ≈ 0.3%)
        assert!((at0 - 0.01).abs() < 0.003, "{at0}");
        assert!((at1 - 0.01).abs() < 0.003, "{at1}");
    }

    #[test]
    fn empirical_cdf_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let norm = calibrate(cosine_1d(), n, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<_> = (0..n).map(|_| TorusPoint::uniform(1, &mut rng)).collect();
        let mut e = norm.evaluate_normalized(&pts).unwrap();
        e.sort_by(f64::total_cmp);
        // interior quantiles map linearly: quantile q sits at (q − 0.01)/0.98
        for q in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let got = quantile_sorted(&e, q);
            let cal = norm.calibration();
            let raw_q = cal.e_lo + got * (cal.e_hi - cal.e_lo);
            // exact arccos-law CDF of 1 + cos θ for uniform θ
            let cdf = 1.0 - (raw_q - 1.0).clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
            assert!((cdf - q).abs() < 0.015, "q {q}: cdf {cdf}");
        }
    }

    #[test]
    fn deterministic_bounds() {
        let a = calibrate(cosine_1d(), 500, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = calibrate(cosine_1d(), 500, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.calibration(), b.calibration());
    }
}
