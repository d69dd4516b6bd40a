//! Stable seed derivation.
//!
//! Every random stream in the crate is seeded from a single user seed through
//! [`derive_seed`]: the first eight bytes (little endian) of
//! `SHA-256(label || 0x00 || base.to_le_bytes() || index.to_le_bytes())`.
//! The result depends only on its inputs, never on generation order or thread
//! count. [`sample_seed`] is the unlabeled form used for per-sample seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(label: &str, base: u64, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    hasher.update(base.to_le_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    derive_seed("", seed, index)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(label: &str, base: u64, index: u64) -> Rng {
    rng(derive_seed(label, base, index))
}
