//! Deterministic, purpose-separated random streams.
//!
//! Every stochastic site derives its own stream from (seed, purpose,
//! index) via SHA-256, so adding a consumer never perturbs the draws of
//! another and runs replay bit-for-bit across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A ChaCha8 stream unique to (seed, purpose, index).
pub fn derive_rng(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(purpose.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
