//! Seeded random streams.
//!
//! All randomness flows from a master seed. Independent work items (one
//! individual in one generation, one dropout mask in one micro-batch) get
//! their own ChaCha stream so that results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a stream keyed by `seed` and a path of indices.
pub fn substream(seed: u64, path: &[u64]) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for p in path {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Stable 64-bit seed derived from arbitrary bytes.
pub fn seed_from_bytes(data: &[u8]) -> u64 {
    let digest = Sha256::digest(data);
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}
