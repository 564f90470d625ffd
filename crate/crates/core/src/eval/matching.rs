use nalgebra::{Matrix3, Vector3};

use super::{EvalError, Result};
use crate::torus::{wrap_signed, TorusPoint};

/// Root-mean-square wrapped angle difference.
pub fn toroidal_distance(a: &TorusPoint, b: &TorusPoint) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let d = a.dim().max(1) as f64;
    (a.angles().iter().zip(b.angles()).map(|(x, y)| wrap_signed(x - y).powi(2)).sum::<f64>() / d).sqrt()
}

/// Coverage and matching of `reference` by `generated`.
///
/// COV is the fraction of reference items with some generated item closer
/// than `delta`; MAT is the mean over references of the nearest distance.
pub fn cov_mat<T, F>(generated: &[T], reference: &[T], delta: f64, distance: F) -> Result<(f64, f64)>
where
    F: Fn(&T, &T) -> f64,
{
    if generated.is_empty() || reference.is_empty() {
        return Err(EvalError::Contract("COV/MAT needs non-empty sets".into()));
    }
    let mut covered = 0usize;
    let mut total = 0.0;
    for r in reference {
        let best = generated.iter().map(|g| distance(r, g)).fold(f64::INFINITY, f64::min);
        if best < delta {
            covered += 1;
        }
        total += best;
    }
    let n = reference.len() as f64;
    Ok((covered as f64 / n, total / n))
}

/// RMSD between two conformations after optimal rigid superposition.
pub fn kabsch_rmsd(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::Contract("coordinate sets must be non-empty and equal in size".into()));
    }
    let n = a.len() as f64;
    let to_vec = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
    let ca = a.iter().map(to_vec).sum::<Vector3<f64>>() / n;
    let cb = b.iter().map(to_vec).sum::<Vector3<f64>>() / n;
    let pa: Vec<Vector3<f64>> = a.iter().map(|p| to_vec(p) - ca).collect();
    let pb: Vec<Vector3<f64>> = b.iter().map(|p| to_vec(p) - cb).collect();
    let h: Matrix3<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y.transpose()).sum();
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    // reflection guard
    let sign = (vt.transpose() * u.transpose()).determinant().signum();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let rot = vt.transpose() * d * u.transpose();
    let sq: f64 = pa.iter().zip(&pb).map(|(x, y)| (rot * x - y).norm_squared()).sum();
    Ok((sq / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    #[test]
    fn distance_cases() {
        let a = TorusPoint::new(vec![0.3, 1.0]);
        assert_eq!(toroidal_distance(&a, &a), 0.0);
        let d = toroidal_distance(&TorusPoint::new(vec![0.1]), &TorusPoint::new(vec![TAU - 0.1]));
        assert!((d - 0.2).abs() < 1e-12);
    }

    #[test]
    fn distance_matches_shift_brute_force() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let a = TorusPoint::uniform(3, &mut r);
            let b = TorusPoint::uniform(3, &mut r);
            let mut sq = 0.0;
            for (x, y) in a.angles().iter().zip(b.angles()) {
                sq += [-1.0, 0.0, 1.0].iter().map(|k| (x - y + k * TAU).powi(2)).fold(f64::INFINITY, f64::min);
            }
            assert!((toroidal_distance(&a, &b) - (sq / 3.0).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_and_far_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let refs: Vec<TorusPoint> = (0..10).map(|_| TorusPoint::uniform(2, &mut r)).collect();
        let mut gen = refs.clone();
        gen.push(TorusPoint::uniform(2, &mut r));
        assert_eq!(cov_mat(&gen, &refs, 0.5, toroidal_distance).unwrap(), (1.0, 0.0));
        let near: Vec<TorusPoint> = (0..10).map(|_| TorusPoint::new(vec![1.0 + r.random_range(-0.1..0.1), 1.0])).collect();
        let far = [TorusPoint::new(vec![1.0 + std::f64::consts::PI, 1.0])];
        assert_eq!(cov_mat(&far, &near, 0.5, toroidal_distance).unwrap().0, 0.0);
        assert!(cov_mat(&[], &near, 0.5, toroidal_distance).is_err());
    }

    #[test]
    fn matches_double_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let refs: Vec<TorusPoint> = (0..10).map(|_| TorusPoint::uniform(2, &mut r)).collect();
            let gen: Vec<TorusPoint> = (0..50).map(|_| TorusPoint::uniform(2, &mut r)).collect();
            let delta = r.random_range(0.1..1.0);
            let mut covered = 0.0;
            let mut mat = 0.0;
            for a in &refs {
                let mut best = f64::INFINITY;
                for b in &gen {
                    let d = toroidal_distance(a, b);
                    if d < best {
                        best = d;
                    }
                }
                if best < delta {
                    covered += 1.0;
                }
                mat += best;
            }
            let (c, m) = cov_mat(&gen, &refs, delta, toroidal_distance).unwrap();
            assert_eq!(c, covered / 10.0);
            assert_eq!(m, mat / 10.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn adding_points_is_monotone(seed in 0u64..300, extra in 1usize..10) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let refs: Vec<TorusPoint> = (0..8).map(|_| TorusPoint::uniform(2, &mut r)).collect();
            let mut gen: Vec<TorusPoint> = (0..5).map(|_| TorusPoint::uniform(2, &mut r)).collect();
            let (c0, m0) = cov_mat(&gen, &refs, 0.5, toroidal_distance).unwrap();
            gen.extend((0..extra).map(|_| TorusPoint::uniform(2, &mut r)));
            let (c1, m1) = cov_mat(&gen, &refs, 0.5, toroidal_distance).unwrap();
            proptest::prop_assert!(c1 >= c0 && m1 <= m0);
        }
    }

    #[test]
    fn kabsch_recovers_rigid_motion() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<[f64; 3]> = (0..12).map(|_| [r.random(), r.random(), r.random()]).collect();
        let rot = nalgebra::Rotation3::from_euler_angles(0.4, -1.1, 2.0);
        let b: Vec<[f64; 3]> = a
            .iter()
            .map(|p| {
                let v = rot * Vector3::new(p[0], p[1], p[2]) + Vector3::new(3.0, -2.0, 0.5);
                [v.x, v.y, v.z]
            })
            .collect();
        assert!(kabsch_rmsd(&a, &b).unwrap() < 1e-10);
        // a mirror image is not superimposable
        let m: Vec<[f64; 3]> = a.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        assert!(kabsch_rmsd(&a, &m).unwrap() > 1e-3);
        // a single displaced atom: RMSD is bounded by the unaligned value
        let mut c = a.clone();
        c[0][0] += 1.0;
        let unaligned = (1.0f64 / 12.0).sqrt();
        let v = kabsch_rmsd(&a, &c).unwrap();
        assert!(v > 0.0 && v <= unaligned + 1e-12);
    }
}
