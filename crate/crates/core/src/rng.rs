//! Named random substreams.
//!
//! Every random draw in the crate descends from one root seed. A substream is
//! identified by a label (`"tree"`, `"rep"`, `"fold"`, ...) and an index, and its
//! seed is `splitmix64(root ^ fnv1a(label) ^ splitmix64(index))`. The generator
//! is ChaCha8 seeded from that value, so alternate implementations can match
//! streams exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed of substream `(label, index)` under `root`.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(root ^ fnv1a(label) ^ splitmix64(index))
}

pub fn substream(root: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, label, index))
}
