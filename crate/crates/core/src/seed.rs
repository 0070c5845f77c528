//! Deterministic random streams.
//!
//! Every random decision in the pipeline is drawn from a ChaCha stream whose seed is
//! derived from a run seed plus a textual tag (an instance id, a stage name). Deriving
//! per-id streams makes per-instance draws independent of iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stable 64-bit seed for `(seed, tag)`.
pub fn derive(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stream for `(seed, tag)`.
pub fn rng_for(seed: u64, tag: &str) -> Rng {
    rng(derive(seed, tag))
}

/// Hex fingerprint of arbitrary bytes, used for cache keys and config fingerprints.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derive_is_stable_and_tag_sensitive() {
        assert_eq!(derive(7, "img1"), derive(7, "img1"));
        assert_ne!(derive(7, "img1"), derive(7, "img2"));
        assert_ne!(derive(7, "img1"), derive(8, "img1"));
        let a: u64 = rng_for(1, "x").random();
        let b: u64 = rng_for(1, "x").random();
        assert_eq!(a, b);
    }
}
