//! Counter-based random streams.
//!
//! Every random draw in a run is addressed by `(seed, purpose, iteration,
//! element)`. The address is hashed into a ChaCha key, so a stream depends
//! only on its coordinates and never on how many draws other streams made
//! before it. Evaluation order (and any future parallelism) therefore cannot
//! change results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// What a stream is used for. Distinct purposes never share key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Batch = 2,
    Corrector = 3,
    ExtraScoreBatch = 4,
    Warmup = 5,
    Eval = 6,
    TeacherSamples = 7,
    Sample = 8,
    Verify = 9,
}

/// Root of all streams for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSeed(pub u64);

impl StreamSeed {
    pub fn stream(self, purpose: Purpose, iteration: u64, element: u64) -> ChaCha8Rng {
        let mut state = self.0 ^ 0x243f_6a88_85a3_08d3;
        let mut key = [0u8; 32];
        let words = [purpose as u64, iteration, element, 0x1319_8a2e_0370_7344];
        for (chunk, word) in key.chunks_exact_mut(8).zip(words) {
            state = splitmix64(state ^ splitmix64(word));
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Vector of independent standard normal draws.
pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
