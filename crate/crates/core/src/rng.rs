//! Named, independently seeded random substreams.
//!
//! A master seed fans out into one ChaCha8 generator per pipeline stage, so
//! that consuming more randomness in one stage never shifts another stage's
//! sequence. Generator position is serializable for exact resume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const STREAM_SPLITS: &str = "splits";
pub const STREAM_FIM: &str = "fim";
pub const STREAM_PUBLIC_FIM: &str = "public-fim";
pub const STREAM_DUPLICATES: &str = "duplicates";
pub const STREAM_INIT: &str = "init";
pub const STREAM_INIT_ADAPTERS: &str = "init-adapters";
pub const STREAM_PRETRAIN: &str = "pretrain";
pub const STREAM_SAMPLING: &str = "sampling";
pub const STREAM_NOISE: &str = "noise";
pub const STREAM_ATTACK: &str = "attack-balancing";

pub const ALL_STREAMS: &[&str] = &[
    STREAM_SPLITS,
    STREAM_FIM,
    STREAM_DUPLICATES,
    STREAM_INIT,
    STREAM_INIT_ADAPTERS,
    STREAM_PRETRAIN,
    STREAM_SAMPLING,
    STREAM_NOISE,
    STREAM_ATTACK,
];

/// 32-byte seed of the substream `name` under `master`.
pub fn substream_seed(master: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(b"/");
    h.update(name.as_bytes());
    h.finalize().into()
}

pub fn substream(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(substream_seed(master, name))
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).ok()?;
        let seed: [u8; 32] = bytes.try_into().ok()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(self.word_pos);
        Some(rng)
    }
}
