//! Von Mises densities, finite mixtures of them, and exact sampling.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use thiserror::Error;

use crate::torus::wrap_signed;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

// Below this the power series is cheap and accurate; above it the
// asymptotic expansion converges in a handful of terms.
const ASYMPTOTIC_FROM: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VonMisesError {
    #[error("concentration {0} must be finite and non-negative")]
    Concentration(f64),
    #[error("location {0} must be finite")]
    Location(f64),
    #[error("mixture needs matching, non-empty component vectors")]
    Components,
}

/// `(e^{-x} I0(x), e^{-x} I1(x))` from the power series with positive terms.
fn scaled_series(x: f64) -> (f64, f64) {
    let q = 0.25 * x * x;
    let mut t0 = (-x).exp();
    let mut t1 = t0 * 0.5 * x;
    let (mut s0, mut s1) = (t0, t1);
    let mut k = 1.0f64;
    loop {
        t0 *= q / (k * k);
        t1 *= q / (k * (k + 1.0));
        s0 += t0;
        s1 += t1;
        if k > 0.5 * x && t0 <= 1e-17 * s0 && t1 <= 1e-17 * s1 {
            break;
        }
        k += 1.0;
    }
    (s0, s1)
}

/// Asymptotic series sum `Σ (-1)^k a_k(ν) / x^k` for `I_ν`, ν ∈ {0, 1}.
fn asymptotic_sum(x: f64, nu: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        let j = (2 * k - 1) as f64;
        term *= -(mu - j * j) / (k as f64 * 8.0 * x);
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// `ln I0(x)` for `x ≥ 0`, relative accuracy ~1e-13 without overflow.
pub fn log_i0(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < ASYMPTOTIC_FROM {
        x + scaled_series(x).0.ln()
    } else {
        x - 0.5 * (TAU * x).ln() + asymptotic_sum(x, 0.0).ln()
    }
}

/// `I1(x) / I0(x)`, the derivative of `ln I0`.
pub fn bessel_ratio(x: f64) -> f64 {
    if x < ASYMPTOTIC_FROM {
        let (s0, s1) = scaled_series(x);
        s1 / s0
    } else {
        asymptotic_sum(x, 1.0) / asymptotic_sum(x, 0.0)
    }
}

/// `κ cos(x − μ) − ln(2π I0(κ))`.
#[inline]
pub fn von_mises_log_pdf(x: f64, loc: f64, kappa: f64) -> f64 {
    kappa * (x - loc).cos() - LN_2PI - log_i0(kappa)
}

/// A single von Mises distribution with its normaliser cached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VonMises {
    loc: f64,
    kappa: f64,
    log_norm: f64,
}

impl VonMises {
    pub fn new(loc: f64, kappa: f64) -> Result<Self, VonMisesError> {
        if !loc.is_finite() {
            return Err(VonMisesError::Location(loc));
        }
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(VonMisesError::Concentration(kappa));
        }
        Ok(VonMises { loc, kappa, log_norm: LN_2PI + log_i0(kappa) })
    }

    pub fn loc(&self) -> f64 {
        self.loc
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    #[inline]
    pub fn log_pdf(&self, x: f64) -> f64 {
        self.kappa * (x - self.loc).cos() - self.log_norm
    }

    /// Draws an angle in `[-π, π)` around `loc` (wrapped), using the
    /// Best–Fisher rejection scheme.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        wrap_signed(self.loc + sample_centered(self.kappa, rng))
    }
}

/// Best–Fisher (1979) sampler for a von Mises centred at zero.
fn sample_centered<R: Rng + ?Sized>(kappa: f64, rng: &mut R) -> f64 {
    if kappa < 1e-8 {
        return rng.random::<f64>() * TAU - PI;
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let theta = f.clamp(-1.0, 1.0).acos();
            return if rng.random::<f64>() < 0.5 { -theta } else { theta };
        }
    }
}

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Gradients of a mixture log-density with respect to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureGrad {
    pub logits: Vec<f64>,
    pub locs: Vec<f64>,
    pub kappas: Vec<f64>,
}

/// Mixture of von Mises components with softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VonMisesMixture {
    log_weights: Vec<f64>,
    components: Vec<VonMises>,
}

impl VonMisesMixture {
    /// Builds a mixture from unnormalised logits, locations and concentrations.
    pub fn from_logits(logits: &[f64], locs: &[f64], kappas: &[f64]) -> Result<Self, VonMisesError> {
        if logits.is_empty() || logits.len() != locs.len() || locs.len() != kappas.len() {
            return Err(VonMisesError::Components);
        }
        let lse = log_sum_exp(logits);
        let components =
            locs.iter().zip(kappas).map(|(&m, &k)| VonMises::new(m, k)).collect::<Result<Vec<_>, _>>()?;
        Ok(VonMisesMixture { log_weights: logits.iter().map(|l| l - lse).collect(), components })
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_weights.iter().map(|l| l.exp())
    }

    pub fn components(&self) -> &[VonMises] {
        &self.components
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let mut terms = [0.0f64; 16];
        if self.components.len() <= terms.len() {
            let t = &mut terms[..self.components.len()];
            for ((o, lw), c) in t.iter_mut().zip(&self.log_weights).zip(&self.components) {
                *o = lw + c.log_pdf(x);
            }
            log_sum_exp(t)
        } else {
            let t: Vec<f64> =
                self.log_weights.iter().zip(&self.components).map(|(lw, c)| lw + c.log_pdf(x)).collect();
            log_sum_exp(&t)
        }
    }

    /// Log-density and its gradient with respect to logits, locations and
    /// concentrations.
    pub fn log_pdf_with_grad(&self, x: f64) -> (f64, MixtureGrad) {
        let terms: Vec<f64> =
            self.log_weights.iter().zip(&self.components).map(|(lw, c)| lw + c.log_pdf(x)).collect();
        let lp = log_sum_exp(&terms);
        let k = terms.len();
        let mut g = MixtureGrad { logits: vec![0.0; k], locs: vec![0.0; k], kappas: vec![0.0; k] };
        for i in 0..k {
            let resp = (terms[i] - lp).exp();
            let c = &self.components[i];
            let d = x - c.loc;
            g.logits[i] = resp - self.log_weights[i].exp();
            g.locs[i] = resp * c.kappa * d.sin();
            g.kappas[i] = resp * (d.cos() - bessel_ratio(c.kappa));
        }
        (lp, g)
    }

    /// Samples an angle in `[-π, π)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, lw) in self.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u < acc {
                pick = i;
                break;
            }
        }
        self.components[pick].sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// I0 by composite Simpson on (1/π)∫₀^π e^{κ(cosθ − 1)} dθ, returned as ln I0.
    fn log_i0_quadrature(kappa: f64) -> f64 {
        let n = 20_000;
        let h = PI / n as f64;
        let f = |t: f64| (kappa * (t.cos() - 1.0)).exp();
        let mut s = f(0.0) + f(PI);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        kappa + (s * h / 3.0 / PI).ln()
    }

    #[test]
    fn bessel_against_quadrature() {
        for &k in &[0.5, 4.0, 7.3, 20.0, 32.0, 49.9, 50.0, 50.1, 120.0, 200.0, 499.0, 500.0] {
            let a = log_i0(k);
            let b = log_i0_quadrature(k);
            // relative accuracy of I0 itself: |Δ ln I0| ≈ |ΔI0|/I0
            assert!((a - b).abs() < 1e-12, "kappa {k}: {a} vs {b}");
        }
        assert_eq!(log_i0(0.0), 0.0);
    }

    #[test]
    fn bessel_ratio_is_derivative() {
        for &k in &[4.0, 10.0, 49.0, 51.0, 300.0] {
            let h = 1e-5;
            let fd = (log_i0(k + h) - log_i0(k - h)) / (2.0 * h);
            assert!((fd - bessel_ratio(k)).abs() < 1e-8, "kappa {k}");
        }
    }

    #[test]
    fn at_mode_kappa_4() {
        let expected = (4.0f64.exp() / (TAU * log_i0_quadrature(4.0).exp())).ln();
        assert!((von_mises_log_pdf(0.0, 0.0, 4.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_limit() {
        for &x in &[0.0, 1.0, 3.0, 5.5] {
            let p = von_mises_log_pdf(x, 0.7, 1e-12).exp();
            assert!((p - 1.0 / TAU).abs() < 1e-10);
        }
    }

    #[test]
    fn integrates_to_one() {
        for &k in &[4.0, 32.0, 200.0] {
            let n = 10_000;
            let h = TAU / n as f64;
            let s: f64 = (0..n).map(|i| von_mises_log_pdf(i as f64 * h, 1.1, k).exp()).sum::<f64>() * h;
            assert!((s - 1.0).abs() < 1e-9, "kappa {k}: {s}");
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(VonMises::new(0.0, -1.0).is_err());
        assert!(VonMises::new(f64::NAN, 1.0).is_err());
        assert!(VonMisesMixture::from_logits(&[0.0], &[0.0, 1.0], &[4.0]).is_err());
    }

    #[test]
    fn mixture_reductions() {
        let single = VonMisesMixture::from_logits(&[0.3], &[1.0], &[6.0]).unwrap();
        let dup = VonMisesMixture::from_logits(&[0.0, 0.0], &[1.0, 1.0], &[6.0, 6.0]).unwrap();
        for &x in &[0.0, 1.0, 2.5, 6.0] {
            let v = von_mises_log_pdf(x, 1.0, 6.0);
            assert!((single.log_pdf(x) - v).abs() < 1e-14);
            assert!((dup.log_pdf(x) - v).abs() < 1e-14);
        }
    }

    #[test]
    fn mixture_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let locs: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..TAU)).collect();
            let kappas: Vec<f64> = (0..5).map(|_| rng.random_range(4.0..60.0)).collect();
            let m = VonMisesMixture::from_logits(&logits, &locs, &kappas).unwrap();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for _ in 0..10 {
                let x: f64 = rng.random_range(0.0..TAU);
                let naive: f64 = (0..5)
                    .map(|i| {
                        let i0 = log_i0_quadrature(kappas[i]).exp();
                        logits[i].exp() / z * (kappas[i] * (x - locs[i]).cos()).exp() / (TAU * i0)
                    })
                    .sum();
                assert!((m.log_pdf(x).exp() - naive).abs() < 1e-10 * naive.max(1.0));
            }
        }
    }

    #[test]
    fn large_kappa_no_overflow() {
        let m = VonMisesMixture::from_logits(&[0.0, 1.0], &[0.0, 3.0], &[500.0, 500.0]).unwrap();
        for &x in &[0.0, 1.5, 3.0, 4.6] {
            assert!(m.log_pdf(x).is_finite());
        }
    }

    #[test]
    fn mixture_grad_finite_difference() {
        let logits = [0.2, -0.4, 1.0];
        let locs = [0.5, 2.0, 4.0];
        let kappas = [4.5, 10.0, 60.0];
        let x = 1.3;
        let m = VonMisesMixture::from_logits(&logits, &locs, &kappas).unwrap();
        let (lp, g) = m.log_pdf_with_grad(x);
        assert!((lp - m.log_pdf(x)).abs() < 1e-14);
        let h = 1e-5;
        let eval = |lg: &[f64], lc: &[f64], kp: &[f64]| VonMisesMixture::from_logits(lg, lc, kp).unwrap().log_pdf(x);
        for i in 0..3 {
            let mut a = logits;
            let mut b = logits;
            a[i] += h;
            b[i] -= h;
            let fd = (eval(&a, &locs, &kappas) - eval(&b, &locs, &kappas)) / (2.0 * h);
            assert!((fd - g.logits[i]).abs() < 1e-8);
            let mut a = locs;
            let mut b = locs;
            a[i] += h;
            b[i] -= h;
            let fd = (eval(&logits, &a, &kappas) - eval(&logits, &b, &kappas)) / (2.0 * h);
            assert!((fd - g.locs[i]).abs() < 1e-8);
            let mut a = kappas;
            let mut b = kappas;
            a[i] += h;
            b[i] -= h;
            let fd = (eval(&logits, &locs, &a) - eval(&logits, &locs, &b)) / (2.0 * h);
            assert!((fd - g.kappas[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn concentrated_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vm = VonMises::new(0.3, 500.0).unwrap();
        let n = 10_000;
        let close = (0..n).filter(|_| (vm.sample(&mut rng) - 0.3).abs() < 0.15).count();
        assert!(close as f64 >= 0.99 * n as f64);
    }
}
