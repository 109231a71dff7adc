//! Stable seed derivation: every subsystem RNG stream is derived from the
//! single run seed by hashing (seed, label), so parallel and serial
//! generation see identical streams.

use sha2::{Digest, Sha256};

pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[0..8].try_into().expect("8 bytes"))
}

pub fn derive_seed_indexed(base: u64, label: &str, index: u64) -> u64 {
    derive_seed(base, &format!("{label}/{index}"))
}
