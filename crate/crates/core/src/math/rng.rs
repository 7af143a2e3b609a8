//! Seeded random streams.
//!
//! A run owns a single root seed; every consumer derives its own stream
//! through a chain of human-readable labels ("encoder", "shuffle/3", ...).
//! Two streams with different label chains are statistically independent,
//! and the same chain always yields the same stream, which is what makes
//! whole runs bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A node in the seed tree. Cheap to copy; derive children with
/// [`SeedStream::substream`] and materialize an RNG with [`SeedStream::rng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives a child stream from a label. The child seed mixes the parent
    /// seed with an FNV-1a hash of the label through SplitMix64, so sibling
    /// labels and parent/child pairs do not collide in practice.
    pub fn substream(&self, label: &str) -> SeedStream {
        SeedStream { seed: splitmix64(self.seed ^ fnv1a64(label.as_bytes())) }
    }

    /// Convenience for labels with a numeric suffix, e.g. `shuffle/7`.
    pub fn substream_indexed(&self, label: &str, index: u64) -> SeedStream {
        self.substream(&format!("{label}/{index}"))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit content hash used for config fingerprints.
pub fn fnv1a64_str(s: &str) -> u64 {
    fnv1a64(s.as_bytes())
}
