//! Deterministic random-number streams.
//!
//! A single root seed is split into independent named streams so that each
//! consumer (environment stepping, negative sampling, network initialization,
//! policy noise, ...) owns its own generator. Streams are derived by hashing
//! `(root, name, index)`, which makes parallel work deterministic regardless
//! of scheduling: a worker for item `k` derives the stream for `k` directly
//! instead of advancing a shared generator.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche behavior for seed mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_str(s: &str) -> u64 {
    // FNV-1a, then one mixing round.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(h)
}

/// Root of the seed hierarchy for one experiment run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        SeedTree { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Seed of the named stream.
    pub fn stream_seed(&self, name: &str) -> u64 {
        mix(self.root ^ hash_str(name))
    }

    /// Seed of item `index` within the named stream.
    pub fn item_seed(&self, name: &str, index: u64) -> u64 {
        mix(self.stream_seed(name) ^ mix(index.wrapping_add(0x51_7c_c1_b7_27_22_0a_95)))
    }

    /// Generator for the named stream.
    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.stream_seed(name))
    }

    /// Generator for item `index` within the named stream.
    pub fn item_rng(&self, name: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.item_seed(name, index))
    }

    /// Child tree, for components that split further on their own.
    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree { root: self.stream_seed(name) }
    }
}

/// Standalone helper for code that only needs one generator.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_stable_and_distinct() {
        let t = SeedTree::new(7);
        assert_eq!(t.stream_seed("env"), t.stream_seed("env"));
        assert_ne!(t.stream_seed("env"), t.stream_seed("negatives"));
        assert_ne!(t.item_seed("env", 0), t.item_seed("env", 1));
        assert_ne!(SeedTree::new(7).stream_seed("env"), SeedTree::new(8).stream_seed("env"));
    }

    #[test]
    fn rng_reproduces() {
        let mut a = SeedTree::new(3).item_rng("x", 5);
        let mut b = SeedTree::new(3).item_rng("x", 5);
        let va: Vec<f64> = (0..8).map(|_| a.gen_range(-1.0..1.0)).collect();
        let vb: Vec<f64> = (0..8).map(|_| b.gen_range(-1.0..1.0)).collect();
        assert_eq!(va, vb);
    }

    #[test]
    fn child_trees_diverge() {
        let t = SeedTree::new(11);
        assert_ne!(t.child("a").stream_seed("x"), t.child("b").stream_seed("x"));
    }
}
