//! Named, reproducible random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const SIMDATA: &str = "simdata";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const FOLDS: &str = "folds";

/// Derives independent ChaCha streams keyed by `(root, name, indices)`.
///
/// The derivation hashes its key, so a stream never depends on how many other
/// streams were drawn before it or in which order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    root: u64,
}

impl SeedStreams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    fn digest(&self, name: &str, indices: &[u64]) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.root.to_le_bytes());
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        for i in indices {
            hasher.update(i.to_le_bytes());
        }
        let out = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&out);
        seed
    }

    pub fn rng(&self, name: &str, indices: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.digest(name, indices))
    }

    /// A child root seed, for handing a whole stage its own [`SeedStreams`].
    pub fn derive_seed(&self, name: &str, indices: &[u64]) -> u64 {
        let d = self.digest(name, indices);
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn child(&self, name: &str, indices: &[u64]) -> SeedStreams {
        SeedStreams::new(self.derive_seed(name, indices))
    }
}
