//! Points on the hyper-torus `[0, 2π)^d` and angle-wrapping helpers.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Wraps an angle into `[0, 2π)`.
#[inline]
pub fn wrap_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Wraps an angular difference into `[-π, π)`.
#[inline]
pub fn wrap_signed(delta: f64) -> f64 {
    let r = wrap_angle(delta + PI) - PI;
    if r >= PI {
        r - TAU
    } else {
        r
    }
}

/// A point `x ∈ [0, 2π)^d`. Every constructor wraps, so the canonical
/// range holds for any value observed through the public API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TorusPoint(Vec<f64>);

impl TorusPoint {
    pub fn new(angles: impl Into<Vec<f64>>) -> Self {
        let mut v: Vec<f64> = angles.into();
        v.iter_mut().for_each(|a| *a = wrap_angle(*a));
        TorusPoint(v)
    }

    pub fn zeros(dim: usize) -> Self {
        TorusPoint(vec![0.0; dim])
    }

    pub fn uniform<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        TorusPoint((0..dim).map(|_| rng.random::<f64>() * TAU).map(wrap_angle).collect())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn angles(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Returns `self + delta` wrapped onto the torus.
    pub fn shifted(&self, delta: &[f64]) -> Self {
        debug_assert_eq!(delta.len(), self.dim());
        TorusPoint(self.0.iter().zip(delta).map(|(a, d)| wrap_angle(a + d)).collect())
    }

    /// Per-coordinate signed difference `self - other` in `[-π, π)`.
    pub fn signed_diff(&self, other: &TorusPoint) -> Vec<f64> {
        self.0.iter().zip(&other.0).map(|(a, b)| wrap_signed(a - b)).collect()
    }

    /// Toroidal max-norm distance.
    pub fn max_norm_distance(&self, other: &TorusPoint) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| wrap_signed(a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl AsRef<[f64]> for TorusPoint {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrap_edges() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert_eq!(wrap_angle(TAU), 0.0);
        assert!(wrap_angle(-1e-300) < TAU);
        assert!((wrap_angle(-0.5) - (TAU - 0.5)).abs() < 1e-15);
        assert_eq!(wrap_signed(PI), -PI);
        assert!((wrap_signed(TAU - 0.1) + 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn wrapped_ranges(x in -1e4f64..1e4) {
            let w = wrap_angle(x);
            prop_assert!((0.0..TAU).contains(&w));
            let s = wrap_signed(x);
            prop_assert!((-PI..PI).contains(&s));
            // same residue class
            let k = ((x - w) / TAU).round();
            prop_assert!((x - w - k * TAU).abs() < 1e-9);
        }
    }
}
