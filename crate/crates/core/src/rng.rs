//! Deterministic random streams.
//!
//! Every source of randomness in an experiment is a [`StreamRng`] derived from
//! the global seed plus a label and index path (e.g. `("train", [iteration,
//! member_id])`). Streams for different purposes never overlap, so results are
//! a pure function of the configuration and seed regardless of how work is
//! scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DOMAIN: &[u8] = b"pbtnas/stream/v1";

/// A named, derivable ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRng(ChaCha8Rng);

impl StreamRng {
    /// Derive a stream from the global seed, a purpose label, and an index path.
    pub fn derive(global_seed: u64, label: &str, path: &[u64]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(DOMAIN);
        hasher.update(global_seed.to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        for ix in path {
            hasher.update(ix.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        StreamRng(ChaCha8Rng::from_seed(seed))
    }

    /// Capture the exact stream state for checkpointing.
    pub fn state(&self) -> RngState {
        RngState {
            seed: hex::encode(self.0.get_seed()),
            stream: self.0.get_stream(),
            word_pos: format!("{}", self.0.get_word_pos()),
        }
    }

    /// Restore a stream captured by [`StreamRng::state`].
    pub fn restore(state: &RngState) -> Result<Self> {
        let bytes = hex::decode(&state.seed)
            .map_err(|e| Error::Checkpoint(format!("bad rng seed hex: {e}")))?;
        if bytes.len() != 32 {
            return Err(Error::Checkpoint(format!(
                "rng seed must be 32 bytes, got {}",
                bytes.len()
            )));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(state.stream);
        let word_pos: u128 = state
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad rng word_pos: {e}")))?;
        rng.set_word_pos(word_pos);
        Ok(StreamRng(rng))
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
}

/// Serializable snapshot of a stream's position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}
