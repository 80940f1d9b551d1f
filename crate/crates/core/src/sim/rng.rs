//! Counter-based random streams.
//!
//! Every draw is addressed by `(seed, replication, tag, id, slot)`, so the
//! numbers an agent sees do not depend on the order in which cells or
//! replications are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Disjoint substreams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamTag {
    Permutation = 1,
    Arrival = 2,
    Regeneration = 3,
    TieBreak = 4,
    Initial = 5,
    OpponentBids = 6,
}

/// `2^4` 32-bit words reserved per slot and stream.
const WORDS_PER_SLOT_LOG2: u32 = 4;

#[derive(Clone, Debug)]
pub struct Streams {
    base: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self::for_replication(seed, 0)
    }

    /// Independent key per `(seed, replication)`.
    pub fn for_replication(seed: u64, replication: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&replication.to_le_bytes());
        Self {
            base: ChaCha8Rng::from_seed(key),
        }
    }

    /// Generator positioned at the start of `slot` in stream `(tag, id)`.
    pub fn rng(&self, tag: StreamTag, id: u64, slot: u64) -> ChaCha8Rng {
        debug_assert!(id < 1 << 48);
        let mut rng = self.base.clone();
        rng.set_stream(((tag as u64) << 48) ^ id);
        rng.set_word_pos((slot as u128) << WORDS_PER_SLOT_LOG2);
        rng
    }
}
