use rand::Rng;

use super::{EvalError, Result};
use crate::gfn::GflowNet;
use crate::policy::TrajectoryState;
use crate::torus::TorusPoint;
use crate::vonmises::log_sum_exp;

// rows per batched network evaluation
const CHUNK_ROWS: usize = 8192;

/// Importance-sampled `log π̂(x)` using the backward policy as proposal:
/// `log Σᵢ exp(log P_F(τᵢ) − log P_B(τᵢ|x)) − log N` over `n` backward
/// trajectories from `x` to the source.
pub fn estimate_log_likelihood<R: Rng + ?Sized>(x: &TorusPoint, gfn: &GflowNet, n: usize, rng: &mut R) -> Result<f64> {
    Ok(estimate_log_likelihoods(std::slice::from_ref(x), gfn, n, rng)?[0])
}

/// [`estimate_log_likelihood`] for many points, batching network calls.
pub fn estimate_log_likelihoods<R: Rng + ?Sized>(
    points: &[TorusPoint],
    gfn: &GflowNet,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(EvalError::Contract("need at least one trajectory per point".into()));
    }
    if let Some(p) = points.iter().find(|p| p.dim() != gfn.dim()) {
        return Err(EvalError::Contract(format!("point of dimension {} for a {}-d model", p.dim(), gfn.dim())));
    }
    let per_chunk = (CHUNK_ROWS / (n * gfn.horizon())).max(1);
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(per_chunk) {
        let weights = log_weights(chunk, gfn, n, rng)?;
        out.extend(weights.chunks_exact(n).map(|w| log_sum_exp(w) - (n as f64).ln()));
    }
    Ok(out)
}

/// `log P_F(τ) − log P_B(τ|x)` for `n` backward trajectories per point.
fn log_weights<R: Rng + ?Sized>(points: &[TorusPoint], gfn: &GflowNet, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let horizon = gfn.horizon();
    let dim = gfn.dim();
    let rows = points.len() * n;
    // paths[r][t] is s_t of trajectory r
    let mut paths: Vec<Vec<TrajectoryState>> = Vec::with_capacity(rows);
    for p in points {
        let terminal = TrajectoryState::new(p.clone(), horizon)?;
        for _ in 0..n {
            let mut v = vec![TrajectoryState::source(dim); horizon + 1];
            v[horizon] = terminal.clone();
            paths.push(v);
        }
    }
    let mut log_w = vec![0.0; rows];
    for t in (2..=horizon).rev() {
        let cur: Vec<&TrajectoryState> = paths.iter().map(|p| &p[t]).collect();
        let outs = gfn.backward.outputs(&cur)?;
        for (r, out) in outs.iter().enumerate() {
            let dec = out.sample(rng);
            log_w[r] -= out.log_pdf(&dec);
            let back: Vec<f64> = dec.iter().map(|d| -d).collect();
            let prev = paths[r][t].point().shifted(&back);
            paths[r][t - 1] = TrajectoryState::new(prev, t - 1)?;
        }
    }
    let states: Vec<&TrajectoryState> = paths.iter().flat_map(|p| p[..horizon].iter()).collect();
    let outs = gfn.forward.outputs(&states)?;
    for (i, out) in outs.iter().enumerate() {
        let (r, t) = (i / horizon, i % horizon);
        let inc = paths[r][t + 1].point().signed_diff(paths[r][t].point());
        log_w[r] += out.log_pdf(&inc);
    }
    Ok(log_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn model(dim: usize, horizon: usize, seed: u64) -> GflowNet {
        let pc = PolicyConfig { dim, horizon, hidden: vec![16, 16], n_components: 5, ..Default::default() };
        GflowNet::new(&pc, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    /// Backward policy fixed to five evenly spaced κ = 4 components, a
    /// nearly flat proposal with light-tailed importance weights.
    fn flatten_backward(gfn: &mut GflowNet) {
        let k = gfn.backward.config().n_components;
        let dim = gfn.dim();
        let net = gfn.backward.net_mut();
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let last = net.n_layers() - 1;
        let (_, bias) = net.layer_mut(last);
        for j in 0..dim {
            let block = &mut bias[j * 3 * k..(j + 1) * 3 * k];
            for c in 0..k {
                block[k + c] = c as f64 * TAU / k as f64;
                block[2 * k + c] = -50.0;
            }
        }
    }

    #[test]
    fn single_step_is_exact() {
        let gfn = model(2, 1, 0);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = TorusPoint::new(vec![5.0, 0.7]);
        let want = gfn.forward.output(&TrajectoryState::source(2)).unwrap().log_pdf(&x.signed_diff(&TorusPoint::zeros(2)));
        for n in [1, 7, 50] {
            assert_eq!(estimate_log_likelihood(&x, &gfn, n, &mut r).unwrap(), want);
        }
    }

    #[test]
    fn two_steps_match_quadrature() {
        let mut gfn = model(1, 2, 2);
        flatten_backward(&mut gfn);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let first = gfn.forward.output(&TrajectoryState::source(1)).unwrap();
        for &x in &[0.4, 2.5, 4.4, 5.9] {
            let bins = 256;
            let h = TAU / bins as f64;
            let mut p = 0.0;
            for i in 0..bins {
                let s1 = TorusPoint::new(vec![(i as f64 + 0.5) * h]);
                let state = TrajectoryState::new(s1.clone(), 1).unwrap();
                let second = gfn.forward.output(&state).unwrap();
                let lp = first.log_pdf(&s1.signed_diff(&TorusPoint::zeros(1)))
                    + second.log_pdf(&TorusPoint::new(vec![x]).signed_diff(&s1));
                p += lp.exp() * h;
            }
            let est = estimate_log_likelihood(&TorusPoint::new(vec![x]), &gfn, 20_000, &mut r).unwrap().exp();
            assert!((est / p - 1.0).abs() < 0.02, "x={x}: {est} vs {p}");
        }
    }

    #[test]
    fn batched_equals_sequential() {
        let gfn = model(2, 3, 4);
        let pts: Vec<TorusPoint> = (0..5).map(|i| TorusPoint::new(vec![i as f64, 2.0 * i as f64])).collect();
        let batched = estimate_log_likelihoods(&pts, &gfn, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(batched.len(), 5);
        assert!(batched.iter().all(|v| v.is_finite()));
        assert!(estimate_log_likelihoods(&pts, &gfn, 0, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }
}
