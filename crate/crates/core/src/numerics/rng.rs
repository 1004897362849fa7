//! Seed derivation for reproducible random streams.
//!
//! Every stochastic operation in the crate draws from a ChaCha stream whose
//! seed is derived from a root seed plus a path of labels. Two runs with the
//! same root seed therefore produce bitwise identical draws no matter in which
//! order (or on which thread) the streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Node in a deterministic seed tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedKey(u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl SeedKey {
    pub fn new(seed: u64) -> Self {
        SeedKey(splitmix64(seed))
    }

    /// Child stream for an integer label (epoch, sample index, ...).
    pub fn child(self, index: u64) -> Self {
        SeedKey(splitmix64(self.0 ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    /// Child stream for a string label.
    pub fn named(self, label: &str) -> Self {
        self.child(fnv1a(label))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
