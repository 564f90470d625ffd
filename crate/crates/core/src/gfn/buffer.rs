use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ReplaySampling, Trajectory};

/// Keeps the highest-reward trajectories seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    dedup_tolerance: f64,
    // sorted by descending log-reward
    entries: Vec<Trajectory>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dedup_tolerance: f64) -> Self {
        ReplayBuffer { capacity, dedup_tolerance, entries: Vec::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[Trajectory] {
        &self.entries
    }

    pub fn min_log_reward(&self) -> Option<f64> {
        self.entries.last().map(|t| t.log_reward)
    }

    /// Inserts `t` if there is room or it beats the current minimum, unless
    /// a stored terminal point lies within the dedup tolerance. Returns
    /// whether the buffer changed.
    pub fn insert(&mut self, t: Trajectory) -> bool {
        if self.capacity == 0 {
            return false;
        }
        let full = self.entries.len() >= self.capacity;
        if full && t.log_reward <= self.entries.last().unwrap().log_reward {
            return false;
        }
        if self.dedup_tolerance > 0.0
            && self.entries.iter().any(|e| e.terminal().max_norm_distance(t.terminal()) <= self.dedup_tolerance)
        {
            return false;
        }
        if full {
            self.entries.pop();
        }
        let pos = self.entries.partition_point(|e| e.log_reward >= t.log_reward);
        self.entries.insert(pos, t);
        true
    }

    /// Draws up to `n` stored trajectories, without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, how: ReplaySampling, rng: &mut R) -> Vec<Trajectory> {
        let n = n.min(self.entries.len());
        if n == 0 {
            return Vec::new();
        }
        match how {
            ReplaySampling::Uniform => {
                index::sample(rng, self.entries.len(), n).into_iter().map(|i| self.entries[i].clone()).collect()
            }
            ReplaySampling::RewardProportional => {
                let top = self.entries[0].log_reward;
                let weights: Vec<f64> = self.entries.iter().map(|e| (e.log_reward - top).exp()).collect();
                match index::sample_weighted(rng, self.entries.len(), |i| weights[i], n) {
                    Ok(idx) => idx.into_iter().map(|i| self.entries[i].clone()).collect(),
                    Err(_) => self.sample(n, ReplaySampling::Uniform, rng),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::TrajectoryState;
    use crate::torus::TorusPoint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj(x: f64, log_reward: f64) -> Trajectory {
        let s0 = TrajectoryState::source(1);
        let s1 = s0.advance(&[x]);
        Trajectory {
            states: vec![s0, s1],
            increments: vec![vec![x]],
            log_pf: vec![0.0],
            log_pb: vec![0.0],
            energy: 0.0,
            energy_normalized: -log_reward / 32.0,
            log_reward,
        }
    }

    #[test]
    fn empty_buffer_accepts() {
        let mut b = ReplayBuffer::new(3, 1e-6);
        assert!(b.insert(traj(0.1, -1.0)));
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn full_buffer_rejects_below_minimum() {
        let mut b = ReplayBuffer::new(2, 1e-6);
        b.insert(traj(0.1, -1.0));
        b.insert(traj(0.2, -2.0));
        let before = b.clone();
        assert!(!b.insert(traj(0.3, -3.0)));
        assert_eq!(b, before);
        assert!(b.insert(traj(0.4, -1.5)));
        assert_eq!(b.min_log_reward(), Some(-1.5));
    }

    #[test]
    fn near_duplicates_skipped() {
        let mut b = ReplayBuffer::new(5, 1e-6);
        b.insert(traj(0.5, -1.0));
        assert!(!b.insert(traj(0.5 + 5e-7, -0.5)));
        // wrap-aware: 0 and 2π − 1e-7 are neighbours
        b.insert(traj(0.0, -1.0));
        assert!(!b.insert(traj(std::f64::consts::TAU - 1e-7, -0.2)));
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn keeps_top_k_of_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(1000, 1e-6);
        let mut all: Vec<f64> = Vec::new();
        for i in 0..2000 {
            let r = -rng.random_range(0.0..100.0);
            all.push(r);
            // distinct terminal points
            b.insert(traj(i as f64 * 3e-3, r));
        }
        all.sort_by(|a, b| b.total_cmp(a));
        all.truncate(1000);
        let kept: Vec<f64> = b.entries().iter().map(|t| t.log_reward).collect();
        assert_eq!(kept, all);
        assert!(b.entries().iter().all(|t| TorusPoint::new(t.terminal().angles().to_vec()) == *t.terminal()));
    }

    #[test]
    fn sampling_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ReplayBuffer::new(10, 0.0);
        for i in 0..10 {
            b.insert(traj(i as f64 * 0.1, -(i as f64)));
        }
        for how in [ReplaySampling::Uniform, ReplaySampling::RewardProportional] {
            let s = b.sample(5, how, &mut rng);
            assert_eq!(s.len(), 5);
            let mut xs: Vec<f64> = s.iter().map(|t| t.terminal().angles()[0]).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            assert_eq!(xs.len(), 5);
        }
        assert_eq!(b.sample(50, ReplaySampling::Uniform, &mut rng).len(), 10);
    }
}
