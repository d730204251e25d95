//! Named, reproducible RNG sub-streams.
//!
//! Every source of randomness in a run (weight init, subnet sampling, epoch
//! shuffling, synthetic noise, ...) draws from its own ChaCha stream derived
//! from the master seed and a label. Component-level reproducibility follows:
//! adding draws to one stream never shifts another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derive a deterministic RNG from `(master_seed, label)`.
pub fn stream(master_seed: u64, label: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(b"/");
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(seed)
}

/// Derive a stream with a numeric suffix, e.g. one stream per epoch.
pub fn stream_indexed(master_seed: u64, label: &str, index: u64) -> ChaCha20Rng {
    stream(master_seed, &format!("{label}/{index}"))
}

/// FNV-1a 64-bit hash, used for compact content digests in logs and reports.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Digest of an f32 slice's exact bit pattern.
pub fn digest_f32(values: &[f32]) -> u64 {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&bytes)
}
