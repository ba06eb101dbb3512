//! Seed derivation.
//!
//! All randomness in a run flows from one root seed. Every consumer derives
//! its own ChaCha stream from `(root, label, index)`, so adding or reordering
//! consumers never shifts anyone else's draws, and parallel work can own
//! independent streams whose output does not depend on scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG for `(root, label, index)`.
pub fn derive_rng(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update([0x1f]);
    h.update(label.as_bytes());
    h.update([0x1f]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
