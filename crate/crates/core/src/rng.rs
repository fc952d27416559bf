//! Named, reproducible random streams derived from a single root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Root seed plus a naming scheme for independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Stream for a named phase, e.g. `"phase1"`.
    pub fn stream(&self, name: &str) -> Rng {
        self.substream(name, 0)
    }

    /// Stream for worker/block `index` inside a named phase.
    pub fn substream(&self, name: &str, index: u64) -> Rng {
        let key = splitmix64(self.root ^ fnv1a(name.as_bytes()));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(index);
        rng
    }

    /// Child tree whose streams are disjoint from the parent's.
    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree { root: splitmix64(self.root.wrapping_add(fnv1a(name.as_bytes()))) }
    }
}

/// Shorthand for a single-stream generator from a 64-bit seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
