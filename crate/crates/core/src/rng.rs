//! Seeded random streams.
//!
//! Every stream is ChaCha8 keyed by the 64-bit seed in little-endian order,
//! zero-padded to 32 bytes, with the ChaCha stream id selecting an
//! independent sequence per purpose. Floats are built from integer draws
//! (53 high bits of a `u64`), and Gaussian noise uses the sum of twelve
//! uniforms minus six, so generation involves only IEEE additions and
//! multiplications and is identical on every platform.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stream ids used across the crate.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const PHANTOM: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const CALIBRATION: u64 = 4;
}

#[derive(Debug, Clone)]
pub struct Stream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// Serializable position of a [`Stream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: StreamState) -> Self {
        let mut s = Self::new(state.seed, state.stream);
        s.rng.set_word_pos(state.word_pos);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)` by widening multiply.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Approximately standard normal (Irwin–Hall with twelve terms).
    pub fn gaussian(&mut self) -> f64 {
        let mut acc = 0.0;
        for _ in 0..12 {
            acc += self.uniform();
        }
        acc - 6.0
    }
}
