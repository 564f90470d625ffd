//! Analytic torsional potentials of increasing ruggedness.
//!
//! * `VmMixture`: smooth, few modes; `E(x) = −ln Σ_k w_k Π_j vM(x_j; μ_kj, κ_kj)`,
//!   so `exp(−E)` is a normalised density known in closed form.
//! * `RbTorsion`: Ryckaert–Bellemans cosine series applied to every angle,
//!   `E = Σ_j Σ_n c_n cosⁿ(θ_j − π)`.
//! * `CrossCoupled`: per-angle cosine harmonics plus pairwise
//!   `J (1 − cos(θ_i − θ_j − φ))` couplings.
//! * `Constant`: flat landscape.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_dimensions, EnergyError, EnergyOracle, Result};
use crate::torus::TorusPoint;
use crate::vonmises::{log_i0, log_sum_exp};

/// Ryckaert–Bellemans coefficients for the butane C–C–C–C torsion (kJ/mol).
pub const BUTANE_RB: [f64; 6] = [9.28, 12.16, -13.12, -3.06, 26.24, -31.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmMode {
    pub weight: f64,
    pub loc: Vec<f64>,
    pub kappa: Vec<f64>,
}

/// `amplitude · (1 + cos(n θ − phase))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTerm {
    pub n: u32,
    pub amplitude: f64,
    pub phase: f64,
}

/// `strength · (1 − cos(θ_i − θ_j − phase))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub i: usize,
    pub j: usize,
    pub strength: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticPotential {
    VmMixture { modes: Vec<VmMode> },
    RbTorsion { dimension: usize, coeffs: Vec<f64> },
    CrossCoupled { terms: Vec<Vec<CosineTerm>>, couplings: Vec<Coupling> },
    Constant { dimension: usize, value: f64 },
}

impl AnalyticPotential {
    /// Four well-separated, unequally weighted modes on the 2-torus.
    pub fn four_mode_2d() -> Self {
        let mode = |weight: f64, loc: [f64; 2], kappa: [f64; 2]| VmMode {
            weight,
            loc: loc.to_vec(),
            kappa: kappa.to_vec(),
        };
        AnalyticPotential::VmMixture {
            modes: vec![
                mode(0.35, [1.0, 1.3], [3.0, 4.0]),
                mode(0.25, [2.6, 4.6], [4.0, 3.0]),
                mode(0.25, [4.3, 2.2], [3.5, 3.5]),
                mode(0.15, [5.2, 5.4], [5.0, 4.0]),
            ],
        }
    }

    /// Two modes on the circle.
    pub fn two_mode_1d() -> Self {
        AnalyticPotential::VmMixture {
            modes: vec![
                VmMode { weight: 0.6, loc: vec![1.0], kappa: vec![3.0] },
                VmMode { weight: 0.4, loc: vec![4.0], kappa: vec![3.0] },
            ],
        }
    }

    pub fn butane(dimension: usize) -> Self {
        AnalyticPotential::RbTorsion { dimension, coeffs: BUTANE_RB.to_vec() }
    }

    /// A reproducible coupled landscape: one- and three-fold harmonics per
    /// angle and a chain of nearest-neighbour couplings.
    pub fn cross_coupled(dimension: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let terms = (0..dimension)
            .map(|_| {
                vec![
                    CosineTerm { n: 1, amplitude: rng.random_range(0.5..1.5), phase: rng.random_range(0.0..TAU) },
                    CosineTerm { n: 3, amplitude: rng.random_range(0.2..0.8), phase: rng.random_range(0.0..TAU) },
                ]
            })
            .collect();
        let couplings = (1..dimension)
            .map(|j| Coupling { i: j - 1, j, strength: rng.random_range(0.3..1.0), phase: rng.random_range(0.0..TAU) })
            .collect();
        AnalyticPotential::CrossCoupled { terms, couplings }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EnergyError::Invalid(m));
        match self {
            AnalyticPotential::VmMixture { modes } => {
                let Some(first) = modes.first() else { return bad("vm_mixture needs at least one mode".into()) };
                let d = first.loc.len();
                if d == 0 {
                    return bad("vm_mixture modes need a dimension".into());
                }
                for (i, m) in modes.iter().enumerate() {
                    if m.loc.len() != d || m.kappa.len() != d {
                        return bad(format!("mode {i} has inconsistent dimension"));
                    }
                    if !(m.weight > 0.0 && m.weight.is_finite()) {
                        return bad(format!("mode {i} weight must be positive"));
                    }
                    if m.kappa.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
                        return bad(format!("mode {i} concentrations must be non-negative"));
                    }
                }
            }
            AnalyticPotential::RbTorsion { dimension, coeffs } => {
                if *dimension == 0 || coeffs.is_empty() {
                    return bad("rb_torsion needs a dimension and coefficients".into());
                }
            }
            AnalyticPotential::CrossCoupled { terms, couplings } => {
                if terms.is_empty() {
                    return bad("cross_coupled needs per-angle terms".into());
                }
                if let Some(c) = couplings.iter().find(|c| c.i >= terms.len() || c.j >= terms.len() || c.i == c.j) {
                    return bad(format!("coupling ({}, {}) out of range", c.i, c.j));
                }
            }
            AnalyticPotential::Constant { dimension, value } => {
                if *dimension == 0 || !value.is_finite() {
                    return bad("constant potential needs a dimension and a finite value".into());
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnalyticPotential::VmMixture { .. } => "vm_mixture",
            AnalyticPotential::RbTorsion { .. } => "rb_torsion",
            AnalyticPotential::CrossCoupled { .. } => "cross_coupled",
            AnalyticPotential::Constant { .. } => "constant",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AnalyticPotential::VmMixture { modes } => modes[0].loc.len(),
            AnalyticPotential::RbTorsion { dimension, .. } => *dimension,
            AnalyticPotential::CrossCoupled { terms, .. } => terms.len(),
            AnalyticPotential::Constant { dimension, .. } => *dimension,
        }
    }

    /// Energy of one point (caller guarantees the dimension).
    pub fn energy(&self, x: &[f64]) -> f64 {
        match self {
            AnalyticPotential::VmMixture { .. } => -self.log_density(x).expect("vm_mixture"),
            AnalyticPotential::RbTorsion { coeffs, .. } => x
                .iter()
                .map(|&theta| {
                    let c = (theta - PI).cos();
                    coeffs.iter().rev().fold(0.0, |acc, &a| acc * c + a)
                })
                .sum(),
            AnalyticPotential::CrossCoupled { terms, couplings } => {
                let local: f64 = terms
                    .iter()
                    .zip(x)
                    .flat_map(|(ts, &theta)| {
                        ts.iter().map(move |t| t.amplitude * (1.0 + (t.n as f64 * theta - t.phase).cos()))
                    })
                    .sum();
                let pair: f64 =
                    couplings.iter().map(|c| c.strength * (1.0 - (x[c.i] - x[c.j] - c.phase).cos())).sum();
                local + pair
            }
            AnalyticPotential::Constant { value, .. } => *value,
        }
    }

    /// For `VmMixture`, the closed-form log-density `−E(x)` of the mixture.
    pub fn log_density(&self, x: &[f64]) -> Option<f64> {
        let AnalyticPotential::VmMixture { modes } = self else { return None };
        let total: f64 = modes.iter().map(|m| m.weight).sum();
        let terms: Vec<f64> = modes
            .iter()
            .map(|m| {
                let mut lp = (m.weight / total).ln();
                for ((&xi, &mu), &k) in x.iter().zip(&m.loc).zip(&m.kappa) {
                    lp += k * (xi - mu).cos() - TAU.ln() - log_i0(k);
                }
                lp
            })
            .collect();
        Some(log_sum_exp(&terms))
    }
}

impl EnergyOracle for AnalyticPotential {
    fn name(&self) -> &str {
        self.kind()
    }

    fn dimension(&self) -> usize {
        self.dim()
    }

    fn evaluate_batch(&self, points: &[TorusPoint]) -> Result<Vec<f64>> {
        check_dimensions(points, self.dim())?;
        points
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let e = self.energy(p.angles());
                if e.is_finite() {
                    Ok(e)
                } else {
                    Err(EnergyError::NonFinite { index, value: e })
                }
            })
            .collect()
    }
}
