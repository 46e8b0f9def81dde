//! Seeded random streams.
//!
//! Every consumer of randomness (shuffling, initialisation, masking, dropout
//! of either branch) draws from its own ChaCha8 stream whose 256-bit key is
//! the concatenation of `(seed, purpose, step, lane)`. Distinct keys give
//! independent streams, so drawing more numbers in one place never shifts
//! the numbers seen anywhere else.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    MainDrop = 3,
    SubDrop = 4,
    SubMask = 5,
    Probe = 6,
    SynthPattern = 7,
    SynthNoise = 8,
    Test = 9,
}

/// Identity of one random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub step: u64,
    pub lane: u64,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose, step: u64) -> Self {
        StreamKey {
            seed,
            purpose,
            step,
            lane: 0,
        }
    }

    pub fn with_lane(self, lane: u64) -> Self {
        StreamKey { lane, ..self }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(self.purpose as u64).to_le_bytes());
        key[16..24].copy_from_slice(&self.step.to_le_bytes());
        key[24..32].copy_from_slice(&self.lane.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

/// Uniform draw in `[0, 1)` with 24 bits of resolution.
pub fn uniform01<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u32() >> 8) as f64 * (1.0 / (1u64 << 24) as f64)
}

/// Unbiased uniform integer in `0..bound` (Lemire's multiply-shift with
/// rejection).
pub fn below<R: RngCore + ?Sized>(rng: &mut R, bound: u64) -> u64 {
    assert!(bound > 0, "empty range");
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let wide = (rng.next_u64() as u128) * (bound as u128);
        if (wide as u64) >= threshold {
            return (wide >> 64) as u64;
        }
    }
}

/// In-place Fisher-Yates shuffle: for `i` from `len-1` down to 1, swap
/// element `i` with a uniformly chosen `j` in `0..=i`.
pub fn shuffle<T, R: RngCore + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// A uniformly random permutation of `0..n`.
pub fn permutation<R: RngCore + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, rng);
    order
}
