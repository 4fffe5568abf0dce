//! Counter-based random streams.
//!
//! A stream is a `(seed, counter)` pair. Every consumer derives its own
//! generator from the pair plus a purpose tag and an index, so draws never
//! depend on evaluation order and batch items can be processed in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Purpose tags for independent substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Timestep = 1,
    Noise = 2,
    TokenDrop = 3,
    TextDrop = 4,
    Batch = 5,
    SamplerInit = 6,
    Init = 7,
    Synth = 8,
    Misc = 9,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub counter: u64,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    pub fn advanced(self, by: u64) -> Self {
        Self {
            seed: self.seed,
            counter: self.counter + by,
        }
    }

    /// Generator for `(purpose, index)` under this stream position.
    pub fn substream(&self, purpose: Purpose, index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut h = splitmix(self.seed);
        for (i, word) in [self.counter, purpose as u64, index, 0xF01E_u64]
            .into_iter()
            .enumerate()
        {
            h = splitmix(h ^ splitmix(word.wrapping_add(i as u64)));
            key[i * 8..(i + 1) * 8].copy_from_slice(&h.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

/// Stable 64-bit hash of a string, used for seeded hash embeddings.
pub fn hash_str(s: &str, seed: u64) -> u64 {
    s.bytes()
        .fold(splitmix(seed ^ 0xA5A5), |h, b| splitmix(h ^ u64::from(b)))
}

/// Mix two integers into a derived seed.
pub fn derive_seed(a: u64, b: u64) -> u64 {
    splitmix(splitmix(a) ^ b.rotate_left(17))
}
