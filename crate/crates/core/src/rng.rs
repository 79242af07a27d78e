//! Seeded randomness.
//!
//! Every consumer draws from a ChaCha8 stream keyed by `(seed, stream-id)`:
//! the key is expanded from the run seed with `SeedableRng::seed_from_u64`
//! and the 64-bit ChaCha stream id selects an independent sequence. Each
//! module owns a fixed stream id, so adding draws in one module never shifts
//! another module's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use rand_chacha::ChaCha8Rng as Rng;

/// Stream ids, one per consumer.
pub mod streams {
    pub const BACKBONE_INIT: u64 = 1;
    pub const ADAPTER_INIT: u64 = 2;
    pub const SCENES: u64 = 3;
    pub const PAIRS_TRAIN: u64 = 4;
    pub const PAIRS_TEST: u64 = 5;
    pub const CLIPS: u64 = 6;
    pub const HELDOUT_CLIPS: u64 = 7;
    pub const PRETRAIN: u64 = 8;
    pub const EDIT_TRAIN: u64 = 9;
    pub const HELDOUT_NOISE: u64 = 10;
    pub const SAMPLER: u64 = 11;
    pub const AUDIT: u64 = 12;
    pub const GRADCHECK: u64 = 13;
}

pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Per-item generator for item `index` of a collection; independent of how
/// many items were generated before it.
pub fn item_stream(seed: u64, stream_id: u64, index: u64) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ splitmix64(stream_id.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(index);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Serializable position of a generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    /// Word position, split into two halves for JSON.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            key: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}
