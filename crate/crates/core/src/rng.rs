//! Keyed random streams.
//!
//! Every random decision in a run is drawn from a stream whose seed is a pure
//! function of the run seed and a structural path (step, scenario index,
//! root-to-node candidate indices, ...). Work can therefore be scheduled on any
//! thread in any order without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Concrete generator used everywhere in the crate.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A position in the tree of derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(splitmix64(seed ^ 0xA7B0_5EED_0000_0001))
    }

    /// Derives the sub-stream labelled `label`.
    #[must_use]
    pub fn child(self, label: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(label.wrapping_add(0x632B_E59B_D9B4_E019))))
    }

    /// Named sub-streams for decisions that are not candidate indices.
    #[must_use]
    pub fn tagged(self, tag: Tag) -> Self {
        self.child(u64::MAX - tag as u64)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Reserved labels so tagged streams never collide with small candidate indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Tag {
    Prune = 0,
    Scenario = 1,
    Batch = 2,
    Eval = 3,
    Init = 4,
    Format = 5,
    Group = 6,
}
