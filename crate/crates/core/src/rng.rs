//! Deterministic random streams.
//!
//! Every stochastic site (parameter init, dropout, data shuffling, corpus
//! generation) draws from its own [`ChaCha8Rng`] stream, keyed by the global
//! seed plus a site label. ChaCha8 has a published specification and its
//! output is identical on every platform, so a fixed seed gives bit-identical
//! runs regardless of machine.
//!
//! The stream key is `splitmix64(splitmix64(seed) ^ fnv1a(label))` — two
//! different labels (or two different seeds) land in unrelated ChaCha
//! keyspaces, so adding a new stochastic site never perturbs existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The concrete RNG used at every stochastic site.
pub type StreamRng = ChaCha8Rng;

/// Derives independent named streams from one global seed.
#[derive(Debug, Clone, Copy)]
pub struct Seeder {
    global: u64,
}

impl Seeder {
    pub fn new(global: u64) -> Self {
        Seeder { global }
    }

    pub fn seed(&self) -> u64 {
        self.global
    }

    /// An independent stream for the given site label.
    pub fn stream(&self, label: &str) -> StreamRng {
        let key = splitmix64(splitmix64(self.global) ^ fnv1a(label.as_bytes()));
        ChaCha8Rng::seed_from_u64(key)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_label_is_identical() {
        let a: Vec<u64> = Seeder::new(7).stream("x").random_iter().take(16).collect();
        let b: Vec<u64> = Seeder::new(7).stream("x").random_iter().take(16).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_give_independent_streams() {
        let mut a = Seeder::new(7).stream("dropout");
        let mut b = Seeder::new(7).stream("shuffle");
        let xa: u64 = a.random();
        let xb: u64 = b.random();
        assert_ne!(xa, xb);
    }

    #[test]
    fn seeds_change_every_stream() {
        let mut a = Seeder::new(1).stream("init");
        let mut b = Seeder::new(2).stream("init");
        let xa: u64 = a.random();
        let xb: u64 = b.random();
        assert_ne!(xa, xb);
    }
}
