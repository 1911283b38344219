//! Seeded random streams.
//!
//! Every sampler draws from its own ChaCha stream keyed by a 64-bit seed and a
//! stream label, so results do not depend on call order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Stream labels for the samplers in this crate.
pub mod stream {
    pub const REWARD_DIRECTION: u64 = 1;
    pub const REWARD_FEATURES: u64 = 2;
    pub const MISSPECIFICATION: u64 = 3;
    pub const POLICY_FEATURES: u64 = 4;
    pub const REFERENCE: u64 = 5;
    pub const TRANSITIONS: u64 = 6;
    pub const OCCUPANCY_FEATURES: u64 = 7;
    pub const PREFERENCES: u64 = 8;
    pub const INIT: u64 = 9;
    pub const PROBE: u64 = 10;
}

/// Generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes several integers into one seed via SHA-256.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}
