use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use torsionflow::energy::{calibrate, AnalyticPotential, Calibration, NormalizedOracle};
use torsionflow::eval::{kde_torus, jsd, TorusGrid};
use torsionflow::gfn::{rollout_batch, train};
use torsionflow::{GflowNet, RewardParams, TorusPoint, TrainConfig};

fn draw(gfn: &GflowNet, oracle: &NormalizedOracle, beta: f64, n: usize, seed: u64) -> Vec<TorusPoint> {
    let flags = vec![vec![false; gfn.horizon()]; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rollout_batch(gfn, oracle, RewardParams { beta }, &flags, &mut rng, false).unwrap();
    batch.iter().map(|t| t.terminal().clone()).collect()
}

// Basin of the second mode (centred at 4.0) on the circle.
fn in_second_basin(x: f64) -> bool {
    x > 2.5 && x < 5.64
}

#[test]
fn two_mode_circle_masses_and_log_z() {
    let beta = 8.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let oracle = calibrate(Box::new(AnalyticPotential::two_mode_1d()), 10_000, &mut rng).unwrap();

    let n = 4096;
    let h = TAU / n as f64;
    let grid: Vec<TorusPoint> = (0..n).map(|i| TorusPoint::new(vec![(i as f64 + 0.5) * h])).collect();
    let reward: Vec<f64> = oracle.evaluate_normalized(&grid).unwrap().iter().map(|e| (-beta * e).exp()).collect();
    let z: f64 = reward.iter().sum::<f64>() * h;
    let second: f64 = grid
        .iter()
        .zip(&reward)
        .filter(|(p, _)| in_second_basin(p.angles()[0]))
        .map(|(_, r)| r * h)
        .sum::<f64>()
        / z;
    assert!(second > 0.15, "target should put real mass on both modes, got {second}");

    let mut cfg = TrainConfig { iterations: 3000, beta, ..Default::default() };
    cfg.policy.dim = 1;
    let out = train(&cfg, &oracle, &mut rng).unwrap();

    let pts = draw(&out.model, &oracle, beta, 5000, 9);
    let got = pts.iter().filter(|p| in_second_basin(p.angles()[0])).count() as f64 / pts.len() as f64;
    assert!((got - second).abs() <= 0.05, "second-mode mass {got} vs {second}");
    assert!((out.model.log_z - z.ln()).abs() <= 0.1, "logZ {} vs {}", out.model.log_z, z.ln());
}

#[test]
fn flat_reward_learns_uniform() {
    let d = 2;
    let calibration = Calibration { n: 0, q_lo: 0.01, q_hi: 0.99, e_lo: 0.0, e_hi: 1.0, observed_min: 0.0, observed_max: 0.0 };
    let oracle = NormalizedOracle::from_calibration(Box::new(AnalyticPotential::Constant { dimension: d, value: 0.0 }), calibration).unwrap();
    let mut cfg = TrainConfig { iterations: 1000, ..Default::default() };
    cfg.policy.dim = d;
    let out = train(&cfg, &oracle, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();

    let pts = draw(&out.model, &oracle, cfg.beta, 20_000, 2);
    let kde = kde_torus(&pts, 25.0, 64).unwrap();
    let n_cells = kde.n_cells();
    let mut uniform = TorusGrid::from_values(d, 64, vec![1.0; n_cells]).unwrap();
    uniform.normalize().unwrap();
    let div = jsd(&kde, &uniform).unwrap();
    assert!(div <= 0.005, "JSD to uniform {div}");
}
