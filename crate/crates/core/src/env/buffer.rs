//! Transition storage and dataset collection.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Env;
use crate::error::{Error, Result};
use crate::rng::SeedTree;

/// One environment transition. `t_in_episode` indexes the step within its
/// episode so multi-step samplers can avoid crossing resets.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: Vec<f64>,
    pub s_next: Vec<f64>,
    pub t_in_episode: u32,
}

/// Bounded FIFO replay store with seeded uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    d_s: usize,
    d_a: usize,
    n_tasks: usize,
    horizon: usize,
    capacity: usize,
    items: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(d_s: usize, d_a: usize, n_tasks: usize, horizon: usize, capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        ReplayBuffer {
            d_s,
            d_a,
            n_tasks,
            horizon,
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 20)),
            rng: SeedTree::new(seed).rng("replay-sampler"),
        }
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Appends a transition, evicting the oldest once at capacity.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.s.len() != self.d_s
            || t.s_next.len() != self.d_s
            || t.a.len() != self.d_a
            || t.r.len() != self.n_tasks
        {
            return Err(Error::ShapeMismatch("transition shape does not match buffer".into()));
        }
        let finite = t
            .s
            .iter()
            .chain(&t.a)
            .chain(&t.r)
            .chain(&t.s_next)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("transition contains NaN or infinity".into()));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    /// `n` uniform indices with replacement from the buffer's own stream.
    pub fn sample_indices(&mut self, n: usize) -> Vec<usize> {
        let len = self.items.len();
        assert!(len > 0, "cannot sample from an empty buffer");
        (0..n).map(|_| self.rng.gen_range(0..len)).collect()
    }

    /// Same draw but from a caller-owned stream; leaves the buffer untouched.
    pub fn sample_indices_with(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        let len = self.items.len();
        assert!(len > 0, "cannot sample from an empty buffer");
        (0..n).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Behavior policy used to gather data.
pub enum CollectPolicy<'a> {
    /// Independent uniform actions each step.
    UniformRandom,
    /// Deterministic triangle sweeps with incommensurate per-dimension rates;
    /// covers the action box without a generator.
    ScriptedSweep,
    /// Caller-provided policy `(state, global_step) -> action`.
    External(&'a mut dyn FnMut(&[f64], usize) -> Vec<f64>),
}

fn sweep_action(d_a: usize, t: usize) -> Vec<f64> {
    (0..d_a)
        .map(|d| {
            let freq = 0.05 * (1.0 + d as f64 * 0.618_033_988_749_895);
            let phase = (t as f64 * freq).rem_euclid(2.0);
            1.0 - 2.0 * (phase - 1.0).abs()
        })
        .collect()
}

/// Runs whole episodes of `env.horizon()` steps until `n_transitions` have
/// been stored (the final episode is cut short if `n_transitions` is not a
/// multiple of the horizon). Episode resets, action draws, and environment
/// noise use independent streams derived from `seed`.
pub fn collect_dataset(
    env: &Env,
    policy: &mut CollectPolicy,
    n_transitions: usize,
    seed: u64,
) -> Result<ReplayBuffer> {
    let tree = SeedTree::new(seed);
    let mut env_rng = tree.rng("env-noise");
    let mut reset_rng = tree.rng("resets");
    let mut action_rng = tree.rng("actions");
    let mut buffer = ReplayBuffer::new(
        env.d_s(),
        env.d_a(),
        env.n_tasks(),
        env.horizon(),
        n_transitions.max(1),
        tree.stream_seed("replay"),
    );
    let mut t_global = 0;
    while buffer.len() < n_transitions {
        let mut s = env.reset(&mut reset_rng);
        for t_ep in 0..env.horizon() {
            let a = match policy {
                CollectPolicy::UniformRandom => env.sample_uniform_action(&mut action_rng),
                CollectPolicy::ScriptedSweep => sweep_action(env.d_a(), t_global),
                CollectPolicy::External(f) => f(&s, t_global),
            };
            let (s_next, r) = env.step(&s, &a, &mut env_rng)?;
            buffer.push(Transition {
                s: s.clone(),
                a,
                r,
                s_next: s_next.clone(),
                t_in_episode: t_ep as u32,
            })?;
            t_global += 1;
            s = s_next;
            if buffer.len() == n_transitions {
                break;
            }
        }
    }
    Ok(buffer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{copy_chain, CopyChainCfg};

    fn tiny_buffer(capacity: usize) -> ReplayBuffer {
        ReplayBuffer::new(2, 1, 0, 10, capacity, 7)
    }

    fn tr(v: f64, t: u32) -> Transition {
        Transition { s: vec![v, v], a: vec![0.0], r: vec![], s_next: vec![v, v], t_in_episode: t }
    }

    #[test]
    fn capacity_evicts_oldest() {
        let mut b = tiny_buffer(3);
        for k in 0..5 {
            b.push(tr(k as f64, k)).unwrap();
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.get(0).s[0], 2.0);
        assert_eq!(b.get(2).s[0], 4.0);
    }

    #[test]
    fn shape_and_nan_rejected() {
        let mut b = tiny_buffer(4);
        let bad_shape =
            Transition { s: vec![0.0], a: vec![0.0], r: vec![], s_next: vec![0.0, 0.0], t_in_episode: 0 };
        assert!(b.push(bad_shape).is_err());
        let mut nan = tr(0.0, 0);
        nan.s_next[1] = f64::NAN;
        assert!(b.push(nan).is_err());
    }

    #[test]
    fn seeded_sampling_repeats() {
        let mut b1 = tiny_buffer(8);
        let mut b2 = tiny_buffer(8);
        let mut other = ReplayBuffer::new(2, 1, 0, 10, 8, 8);
        for k in 0..8 {
            b1.push(tr(k as f64, k)).unwrap();
            b2.push(tr(k as f64, k)).unwrap();
            other.push(tr(k as f64, k)).unwrap();
        }
        assert_eq!(b1.sample_indices(16), b2.sample_indices(16));
        assert_ne!(b1.sample_indices(16), other.sample_indices(16));
    }

    #[test]
    fn collect_links_transitions_and_counts_episodes() {
        let env = crate::env::Env::new(copy_chain(&CopyChainCfg {
            noise_std: 0.0,
            horizon: 5,
            ..CopyChainCfg::default()
        }))
        .unwrap();
        let b = collect_dataset(&env, &mut CollectPolicy::UniformRandom, 12, 3).unwrap();
        assert_eq!(b.len(), 12);
        for (idx, t) in b.iter().enumerate() {
            assert_eq!(t.t_in_episode as usize, idx % 5);
        }
        // Consecutive transitions inside an episode chain together.
        for idx in 0..11 {
            if b.get(idx).t_in_episode < 4 {
                assert_eq!(b.get(idx).s_next, b.get(idx + 1).s);
            }
        }
    }

    #[test]
    fn collect_is_deterministic_in_seed() {
        let env = crate::env::Env::new(copy_chain(&CopyChainCfg::default())).unwrap();
        let b1 = collect_dataset(&env, &mut CollectPolicy::UniformRandom, 40, 9).unwrap();
        let b2 = collect_dataset(&env, &mut CollectPolicy::UniformRandom, 40, 9).unwrap();
        let b3 = collect_dataset(&env, &mut CollectPolicy::UniformRandom, 40, 10).unwrap();
        for i in 0..40 {
            assert_eq!(b1.get(i), b2.get(i));
        }
        assert!((0..40).any(|i| b1.get(i) != b3.get(i)));
    }

    #[test]
    fn scripted_sweep_is_deterministic_and_in_range() {
        for t in 0..500 {
            let a = sweep_action(3, t);
            assert_eq!(a, sweep_action(3, t));
            for v in a {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
        // The sweep actually visits both ends of the range.
        let lo = (0..500).map(|t| sweep_action(1, t)[0]).fold(f64::INFINITY, f64::min);
        let hi = (0..500).map(|t| sweep_action(1, t)[0]).fold(f64::NEG_INFINITY, f64::max);
        assert!(lo < -0.9 && hi > 0.9);
    }
}
