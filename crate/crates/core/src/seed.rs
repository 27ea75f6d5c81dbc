//! Stable seed derivation.
//!
//! Seeds are derived from names rather than positions so that reordering
//! farms, turbines or cells never changes what any one of them computes.

use sha2::{Digest, Sha256};

/// Derives a child seed from a parent seed and a path of labels.
///
/// The result is stable across platforms and compiler versions.
pub fn derive_seed(parent: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
