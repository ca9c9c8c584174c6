//! Named random streams derived from a single master seed.
//!
//! Every subsystem draws from its own stream so that the order in which
//! clients are trained (or whether they are trained in parallel) never changes
//! the random numbers anybody sees.
//!
//! Derivation rule: the 32-byte ChaCha8 seed of stream `(label, path)` is
//!
//! ```text
//! SHA-256( "fedxval/v1" || master_seed as u64 LE || label bytes || 0x00 || path[0] as u64 LE || ... )
//! ```
//!
//! Labels in use: `select` (per round), `train` (per round, client),
//! `submodels` (per round), `delegate` (per round), `report` (per round,
//! evaluator), `dp` (per round, sub-model; `u64::MAX` for the global model),
//! `poison` (per client), `partition`, `init`, `data`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives independent [`StreamRng`]s from a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    master: u64,
}

impl Streams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed_bytes(&self, label: &str, path: &[u64]) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"fedxval/v1");
        hasher.update(self.master.to_le_bytes());
        hasher.update(label.as_bytes());
        hasher.update([0u8]);
        for p in path {
            hasher.update(p.to_le_bytes());
        }
        hasher.finalize().into()
    }

    pub fn stream(&self, label: &str, path: &[u64]) -> StreamRng {
        StreamRng::from_seed(self.seed_bytes(label, path))
    }

    /// A 64-bit seed for APIs that take one (e.g. [`crate::model::init_model`]).
    pub fn seed_u64(&self, label: &str, path: &[u64]) -> u64 {
        let b = self.seed_bytes(label, path);
        u64::from_le_bytes(b[..8].try_into().expect("8 bytes"))
    }
}
