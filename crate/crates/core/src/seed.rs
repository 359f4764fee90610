//! Deterministic derivation of per-consumer seeds from one root seed.

use sha2::{Digest, Sha256};

/// Seed for the consumer named `label`, independent of every other label.
pub fn derive(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed for the `index`-th draw of `label`.
pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    derive(root, &format!("{label}/{index}"))
}
