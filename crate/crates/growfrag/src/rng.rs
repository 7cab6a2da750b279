//! Deterministic, splittable random number streams.
//!
//! Monte Carlo runs here are hierarchical: an experiment spawns replicates,
//! a replicate spawns a cell, a cell spawns its children. Giving every node
//! its own stream keyed by the path of ordinals from the root makes runs
//! reproducible regardless of traversal order or parallel scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; bijective on u64.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A position in the stream tree: a master seed plus a hash of the ordinal
/// path from the root. Cheap to copy; derive concrete generators on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct RngStream {
    master_seed: u64,
    path_hash: u64,
}

impl RngStream {
    /// Stream at the root of the tree.
    pub fn root(master_seed: u64) -> Self {
        Self {
            master_seed,
            path_hash: mix(master_seed ^ GOLDEN_GAMMA),
        }
    }

    /// Child stream for the given ordinal. For a fixed parent the map is
    /// injective in `ordinal`.
    pub fn substream(&self, ordinal: u64) -> Self {
        let absorbed = self
            .path_hash
            .wrapping_add(GOLDEN_GAMMA)
            .wrapping_mul(2 * ordinal + 1);
        Self {
            master_seed: self.master_seed,
            path_hash: mix(absorbed),
        }
    }

    /// 32-byte seed expanded from the stream position.
    fn seed_bytes(&self) -> [u8; 32] {
        let mut state = self.master_seed ^ mix(self.path_hash);
        let mut out = [0u8; 32];
        for chunk in out.chunks_exact_mut(8) {
            state = state.wrapping_add(GOLDEN_GAMMA);
            chunk.copy_from_slice(&mix(state).to_le_bytes());
        }
        out
    }

    /// Concrete generator for this stream position.
    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::from_seed(self.seed_bytes())
    }
}
