//! Deterministic seed splitting.
//!
//! Every random stream in the crate is derived from a root seed plus a fixed
//! label and a list of integer coordinates (step, epoch, batch, ...). The mix
//! is a SplitMix64 finalizer over an FNV-1a hash of the label, so derived
//! seeds are stable across platforms and compiler versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derive a child seed from `root`, a module label and positional indices.
pub fn derive(root: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix(root ^ fnv1a(label));
    for &i in indices {
        h = splitmix(h ^ splitmix(i));
    }
    h
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(root: u64, label: &str, indices: &[u64]) -> Rng {
    rng(derive(root, label, indices))
}
