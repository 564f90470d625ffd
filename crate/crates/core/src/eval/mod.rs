//! Density surfaces on a regular torus grid, divergences between them, and
//! sample-set metrics.

mod likelihood;
mod matching;

use std::f64::consts::TAU;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{EnergyError, NormalizedOracle, RewardParams};
use crate::policy::PolicyError;
use crate::torus::{wrap_signed, TorusPoint};
use crate::vonmises::{log_i0, log_sum_exp};

pub use likelihood::{estimate_log_likelihood, estimate_log_likelihoods};
pub use matching::{cov_mat, kabsch_rmsd, toroidal_distance};

pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_KDE_KAPPA: f64 = 25.0;
pub const MAX_GRID_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("grid quadrature is limited to {MAX_GRID_DIM} dimensions, got {0}")]
    UnsupportedDimension(usize),
    #[error("correlation is undefined: {0}")]
    UndefinedCorrelation(String),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Cell masses on a `resolution^dim` grid over `[0, 2π)^dim`. Cell `i` along
/// an axis is centred at `(i + ½)·2π/resolution`; the first angle varies
/// slowest in `values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    resolution: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl TorusGrid {
    pub fn zeros(dim: usize, resolution: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_GRID_DIM {
            return Err(EvalError::UnsupportedDimension(dim));
        }
        if resolution < 2 {
            return Err(EvalError::Contract("grid resolution must be at least 2".into()));
        }
        Ok(TorusGrid { dim, resolution, values: vec![0.0; resolution.pow(dim as u32)], normalized: false })
    }

    pub fn from_values(dim: usize, resolution: usize, values: Vec<f64>) -> Result<Self> {
        let mut g = Self::zeros(dim, resolution)?;
        if values.len() != g.values.len() {
            return Err(EvalError::Contract(format!("{} values for {} cells", values.len(), g.values.len())));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(EvalError::Contract("grid values must be finite and non-negative".into()));
        }
        g.values = values;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn n_cells(&self) -> usize {
        self.values.len()
    }

    pub fn spacing(&self) -> f64 {
        TAU / self.resolution as f64
    }

    pub fn axis(&self) -> Vec<f64> {
        axis(self.resolution)
    }

    /// Angles of the centre of flat cell index `i`.
    pub fn cell_center(&self, mut i: usize) -> Vec<f64> {
        let h = self.spacing();
        let mut out = vec![0.0; self.dim];
        for j in (0..self.dim).rev() {
            out[j] = ((i % self.resolution) as f64 + 0.5) * h;
            i /= self.resolution;
        }
        out
    }

    /// Flat index of the cell containing `x`.
    pub fn cell_of(&self, x: &[f64]) -> usize {
        x.iter().fold(0, |acc, &a| {
            let k = ((a / self.spacing()) as usize).min(self.resolution - 1);
            acc * self.resolution + k
        })
    }

    /// Rescales to unit total mass.
    pub fn normalize(&mut self) -> Result<()> {
        let total: f64 = self.values.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(EvalError::Contract("grid has no mass to normalise".into()));
        }
        self.values.iter_mut().for_each(|v| *v /= total);
        self.normalized = true;
        Ok(())
    }

    /// Circular convolution with a product von Mises kernel of
    /// concentration `kappa`, renormalised. Applying this to a ground-truth
    /// grid gives the surface a perfect sampler's KDE converges to.
    pub fn smoothed(&self, kappa: f64) -> Result<TorusGrid> {
        let n = self.resolution;
        let kernel: Vec<f64> = (0..n).map(|k| von_mises_pdf(k as f64 * self.spacing(), 0.0, kappa)).collect();
        let mut cur = self.values.clone();
        let mut next = vec![0.0; cur.len()];
        for axis in 0..self.dim {
            let stride = n.pow((self.dim - 1 - axis) as u32);
            let outer = cur.len() / (n * stride);
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * n * stride + s;
                    for i in 0..n {
                        let mut acc = 0.0;
                        for (c, kv) in kernel.iter().enumerate() {
                            acc += kv * cur[base + ((i + n - c) % n) * stride];
                        }
                        next[base + i * stride] = acc;
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let mut g = TorusGrid { dim: self.dim, resolution: n, values: cur, normalized: false };
        g.normalize()?;
        Ok(g)
    }

    /// Writes `theta_0 … theta_{d−1}, density` rows, density being the cell
    /// mass divided by the cell volume.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("theta_{j}")).collect();
        header.push("density".into());
        wtr.write_record(&header)?;
        let vol = self.spacing().powi(self.dim as i32);
        for (i, v) in self.values.iter().enumerate() {
            let mut row: Vec<String> = self.cell_center(i).iter().map(|a| a.to_string()).collect();
            row.push((v / vol).to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn axis(resolution: usize) -> Vec<f64> {
    let h = TAU / resolution as f64;
    (0..resolution).map(|i| (i as f64 + 0.5) * h).collect()
}

fn von_mises_pdf(x: f64, loc: f64, kappa: f64) -> f64 {
    // exp(κ(cos − 1)) / (2π e^{-κ} I₀(κ)) stays finite for large κ
    (kappa * ((x - loc).cos() - 1.0) - (TAU.ln() + log_i0(kappa) - kappa)).exp()
}

/// Periodic kernel density estimate with product von Mises kernels,
/// evaluated at the cell centres and normalised to unit mass.
pub fn kde_torus(samples: &[TorusPoint], kappa: f64, resolution: usize) -> Result<TorusGrid> {
    if samples.len() < 2 {
        return Err(EvalError::Contract("KDE needs at least two samples".into()));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(EvalError::Contract("KDE concentration must be positive".into()));
    }
    let dim = samples[0].dim();
    if samples.iter().any(|p| p.dim() != dim) {
        return Err(EvalError::Contract("samples have mixed dimensions".into()));
    }
    let mut grid = TorusGrid::zeros(dim, resolution)?;
    let ax = axis(resolution);
    let mut factors = vec![0.0; dim * resolution];
    let mut partial = vec![1.0; grid.n_cells()];
    for p in samples {
        for (j, &a) in p.angles().iter().enumerate() {
            for (f, &g) in factors[j * resolution..(j + 1) * resolution].iter_mut().zip(&ax) {
                *f = von_mises_pdf(g, a, kappa);
            }
        }
        // outer product, built one axis at a time
        let mut len = 1;
        partial[0] = 1.0;
        for j in 0..dim {
            let f = &factors[j * resolution..(j + 1) * resolution];
            for i in (0..len).rev() {
                let v = partial[i];
                for (k, fk) in f.iter().enumerate() {
                    partial[i * resolution + k] = v * fk;
                }
            }
            len *= resolution;
        }
        for (g, v) in grid.values.iter_mut().zip(&partial) {
            *g += v;
        }
    }
    grid.normalize()?;
    Ok(grid)
}

/// Cell masses proportional to `exp(log_weight(centre))`, for any batch
/// log-weight function.
pub fn grid_from_log_weight<F>(dim: usize, resolution: usize, mut log_weight: F) -> Result<TorusGrid>
where
    F: FnMut(&[TorusPoint]) -> Result<Vec<f64>>,
{
    let mut grid = TorusGrid::zeros(dim, resolution)?;
    let centers: Vec<TorusPoint> = (0..grid.n_cells()).map(|i| TorusPoint::new(grid.cell_center(i))).collect();
    let mut logs = Vec::with_capacity(centers.len());
    for chunk in centers.chunks(4096) {
        let v = log_weight(chunk)?;
        if v.len() != chunk.len() {
            return Err(EvalError::Contract("log-weight returned the wrong number of values".into()));
        }
        logs.extend(v);
    }
    if logs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(EvalError::Contract("log-weights must be finite or −∞".into()));
    }
    let lse = log_sum_exp(&logs);
    grid.values = logs.iter().map(|l| (l - lse).exp()).collect();
    grid.normalize()?;
    Ok(grid)
}

/// Boltzmann cell masses `∝ exp(−β·E_norm(centre))` by grid quadrature.
pub fn ground_truth_grid(oracle: &NormalizedOracle, beta: f64, resolution: usize) -> Result<TorusGrid> {
    let dim = oracle.dimension();
    if dim > MAX_GRID_DIM {
        return Err(EvalError::UnsupportedDimension(dim));
    }
    let reward = RewardParams { beta };
    grid_from_log_weight(dim, resolution, |pts| {
        Ok(oracle.evaluate_normalized(pts)?.into_iter().map(|e| reward.log_reward(e)).collect())
    })
}

/// Jensen–Shannon divergence of two normalised grids, in nats.
pub fn jsd(p: &TorusGrid, q: &TorusGrid) -> Result<f64> {
    if p.dim != q.dim || p.resolution != q.resolution {
        return Err(EvalError::Contract("grids differ in shape".into()));
    }
    if !(p.normalized && q.normalized) {
        return Err(EvalError::Contract("grids must be normalised".into()));
    }
    let kl_half = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut total = 0.0;
    for (&a, &b) in p.values.iter().zip(&q.values) {
        let m = 0.5 * (a + b);
        total += 0.5 * (kl_half(a, m) + kl_half(b, m));
    }
    Ok(total.clamp(0.0, std::f64::consts::LN_2))
}

/// JSD between the KDE of `samples` and `truth` smoothed by the same kernel.
pub fn sample_jsd(samples: &[TorusPoint], truth: &TorusGrid, kappa: f64) -> Result<f64> {
    let kde = kde_torus(samples, kappa, truth.resolution)?;
    jsd(&kde, &truth.smoothed(kappa)?)
}

/// Pearson correlation between estimated log-likelihoods and log-rewards.
pub fn prob_reward_correlation(log_pi: &[f64], log_reward: &[f64]) -> Result<f64> {
    if log_pi.len() != log_reward.len() {
        return Err(EvalError::Contract("columns differ in length".into()));
    }
    if log_pi.len() < 10 {
        return Err(EvalError::Contract(format!("{} samples; need at least 10", log_pi.len())));
    }
    let n = log_pi.len() as f64;
    let (ma, mb) = (log_pi.iter().sum::<f64>() / n, log_reward.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&a, &b) in log_pi.iter().zip(log_reward) {
        sab += (a - ma) * (b - mb);
        saa += (a - ma).powi(2);
        sbb += (b - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(EvalError::UndefinedCorrelation("a column has zero variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Mass of each region under a grid, given a region label per cell.
pub fn region_masses(grid: &TorusGrid, label: impl Fn(&[f64]) -> usize, n_regions: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_regions];
    for (i, v) in grid.values.iter().enumerate() {
        out[label(&grid.cell_center(i))] += v;
    }
    out
}

/// Labels a point with its nearest centre in toroidal distance.
pub fn nearest_center(x: &[f64], centers: &[Vec<f64>]) -> usize {
    let d2 = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| wrap_signed(a - b).powi(2)).sum::<f64>();
    (0..centers.len()).min_by(|&a, &b| d2(&centers[a]).total_cmp(&d2(&centers[b]))).unwrap_or(0)
}

/// Summary written by the evaluation commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jsd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_reference: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{calibrate, AnalyticPotential, VmMode};
    use crate::vonmises::VonMises;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{LN_2, PI};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn vm_grid(dim: usize, res: usize, loc: f64, kappa: f64) -> TorusGrid {
        grid_from_log_weight(dim, res, |pts| {
            Ok(pts.iter().map(|p| p.angles().iter().map(|&a| kappa * (a - loc).cos()).sum()).collect())
        })
        .unwrap()
    }

    #[test]
    fn cell_indexing_round_trips() {
        let g = TorusGrid::zeros(3, 8).unwrap();
        for i in [0, 1, 7, 8, 63, 64, 511] {
            assert_eq!(g.cell_of(&g.cell_center(i)), i);
        }
        assert_eq!(g.cell_center(1), vec![PI / 8.0, PI / 8.0, 3.0 * PI / 8.0]);
    }

    #[test]
    fn single_point_kde_peaks_at_its_cell() {
        let x = TorusPoint::new(vec![2.0, 5.5]);
        let g = kde_torus(&[x.clone(), x.clone(), x.clone()], 25.0, 64).unwrap();
        let argmax = (0..g.n_cells()).max_by(|&a, &b| g.values()[a].total_cmp(&g.values()[b])).unwrap();
        assert_eq!(argmax, g.cell_of(x.angles()));
        assert!((g.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_samples_give_flat_kde() {
        let mut r = rng(1);
        let s: Vec<TorusPoint> = (0..100_000).map(|_| TorusPoint::uniform(2, &mut r)).collect();
        let g = kde_torus(&s, 10.0, 64).unwrap();
        let (lo, hi) = g.values().iter().fold((f64::MAX, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi / lo < 1.2, "{}", hi / lo);
    }

    #[test]
    fn exact_mixture_samples_match_analytic_grid() {
        let pot = AnalyticPotential::four_mode_2d();
        let AnalyticPotential::VmMixture { modes } = &pot else { unreachable!() };
        let mut r = rng(2);
        let weights: Vec<f64> = modes.iter().map(|m| m.weight).collect();
        let s: Vec<TorusPoint> = (0..100_000)
            .map(|_| {
                let mut u = r.random::<f64>() * weights.iter().sum::<f64>();
                let m: &VmMode = modes.iter().find(|m| {
                    u -= m.weight;
                    u <= 0.0
                })
                .unwrap_or(modes.last().unwrap());
                TorusPoint::new(
                    m.loc.iter().zip(&m.kappa).map(|(&l, &k)| VonMises::new(l, k).unwrap().sample(&mut r)).collect::<Vec<_>>(),
                )
            })
            .collect();
        let truth = grid_from_log_weight(2, 64, |pts| Ok(pts.iter().map(|p| pot.log_density(p.angles()).unwrap()).collect())).unwrap();
        let kde = kde_torus(&s, 25.0, 64).unwrap();
        let v = jsd(&kde, &truth).unwrap();
        assert!(v < 0.005, "{v}");
        // against the kernel-smoothed truth only sampling noise remains
        let v = jsd(&kde, &truth.smoothed(25.0).unwrap()).unwrap();
        assert!(v < 5e-4, "{v}");
    }

    #[test]
    fn closed_form_single_mode_grid() {
        let (loc, kappa) = (2.0, 6.0);
        let g = vm_grid(1, 256, loc, kappa);
        let h = TAU / 256.0;
        let max_err = (0..256)
            .map(|i| (g.values()[i] - von_mises_pdf((i as f64 + 0.5) * h, loc, kappa) * h).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-3, "{max_err}");
        // sup-norm relative error at resolution 128
        let g = vm_grid(1, 128, loc, kappa);
        let h = TAU / 128.0;
        let rel = (0..128)
            .map(|i| {
                let want = von_mises_pdf((i as f64 + 0.5) * h, loc, kappa) * h;
                (g.values()[i] - want).abs() / want
            })
            .fold(0.0, f64::max);
        assert!(rel < 1e-2, "{rel}");
    }

    #[test]
    fn constant_energy_gives_uniform_grid() {
        let g = grid_from_log_weight(2, 16, |pts| Ok(vec![-3.0; pts.len()])).unwrap();
        assert!(g.values().iter().all(|&v| (v - 1.0 / 256.0).abs() < 1e-15));
    }

    #[test]
    fn grid_refinement_converges() {
        let pot = AnalyticPotential::four_mode_2d();
        let mut r = rng(3);
        let oracle = calibrate(Box::new(pot), 10_000, &mut r).unwrap();
        let coarse = ground_truth_grid(&oracle, 32.0, 64).unwrap();
        let fine = ground_truth_grid(&oracle, 32.0, 128).unwrap();
        // pool 2×2 fine cells into each coarse cell
        let mut pooled = vec![0.0; 64 * 64];
        for i in 0..fine.n_cells() {
            let c = fine.cell_center(i);
            pooled[coarse.cell_of(&c)] += fine.values()[i];
        }
        let mut pooled = TorusGrid::from_values(2, 64, pooled).unwrap();
        pooled.normalize().unwrap();
        assert!(jsd(&pooled, &coarse).unwrap() < 1e-3);
    }

    #[test]
    fn high_dimension_is_unsupported() {
        let mut r = rng(4);
        let oracle = calibrate(Box::new(AnalyticPotential::butane(4)), 200, &mut r).unwrap();
        assert!(matches!(ground_truth_grid(&oracle, 32.0, 8), Err(EvalError::UnsupportedDimension(4))));
    }

    #[test]
    fn jsd_bounds() {
        let p = vm_grid(1, 64, 1.0, 3.0);
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        let mut a = TorusGrid::from_values(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut b = TorusGrid::from_values(1, 4, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        a.normalize().unwrap();
        b.normalize().unwrap();
        assert!((jsd(&a, &b).unwrap() - LN_2).abs() < 1e-15);
        assert!(jsd(&a, &vm_grid(1, 8, 0.0, 1.0)).is_err());
    }

    #[test]
    fn jsd_matches_direct_quadrature() {
        let res = 512;
        let p = vm_grid(1, res, 1.0, 4.0);
        let q = vm_grid(1, res, 1.0 + PI, 4.0);
        // continuous JSD by fine Simpson quadrature of the exact densities
        let n = 20_000;
        let h = TAU / n as f64;
        let f = |x: f64| {
            let a = von_mises_pdf(x, 1.0, 4.0);
            let b = von_mises_pdf(x, 1.0 + PI, 4.0);
            let m = 0.5 * (a + b);
            0.5 * (a * (a / m).ln() + b * (b / m).ln())
        };
        let mut s = f(0.0) + f(TAU);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let want = s * h / 3.0;
        let got = jsd(&p, &q).unwrap();
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }

    proptest::proptest! {
        #[test]
        fn jsd_is_symmetric_and_bounded(a in proptest::collection::vec(0.0f64..1.0, 16), b in proptest::collection::vec(0.0f64..1.0, 16)) {
            proptest::prop_assume!(a.iter().sum::<f64>() > 0.0 && b.iter().sum::<f64>() > 0.0);
            let mut p = TorusGrid::from_values(2, 4, a).unwrap();
            let mut q = TorusGrid::from_values(2, 4, b).unwrap();
            p.normalize().unwrap();
            q.normalize().unwrap();
            let (x, y) = (jsd(&p, &q).unwrap(), jsd(&q, &p).unwrap());
            proptest::prop_assert!((x - y).abs() < 1e-15);
            proptest::prop_assert!((0.0..=LN_2).contains(&x));
        }

        #[test]
        fn kde_conserves_mass(seed in 0u64..500, n in 2usize..50, kappa in 1.0f64..200.0) {
            let mut r = rng(seed);
            let s: Vec<TorusPoint> = (0..n).map(|_| TorusPoint::uniform(2, &mut r)).collect();
            let g = kde_torus(&s, kappa, 32).unwrap();
            proptest::prop_assert!((g.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn smoothing_preserves_mass_and_commutes_with_kde() {
        // smoothing a point mass at a cell centre equals the KDE of that centre
        let mut g = TorusGrid::zeros(2, 32).unwrap();
        let i = 32 * 5 + 17;
        g.values[i] = 1.0;
        g.normalize().unwrap();
        let s = g.smoothed(25.0).unwrap();
        let c = TorusPoint::new(g.cell_center(i));
        let k = kde_torus(&[c.clone(), c], 25.0, 32).unwrap();
        let diff = s.values().iter().zip(k.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-14, "{diff}");
    }

    #[test]
    fn correlation_cases() {
        let a: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = a.iter().map(|x| 2.5 * x).collect();
        assert!((prob_reward_correlation(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(prob_reward_correlation(&[1.0; 20], &b), Err(EvalError::UndefinedCorrelation(_))));
        assert!(prob_reward_correlation(&a[..5], &b[..5]).is_err());
    }

    #[test]
    fn grid_csv_has_one_row_per_cell() {
        let g = vm_grid(2, 8, 1.0, 2.0);
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "theta_0,theta_1,density");
        assert_eq!(lines.len(), 65);
        // densities integrate to one
        let h2 = (TAU / 8.0).powi(2);
        let total: f64 = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap() * h2).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
