//! Reproducible per-path random streams.
//!
//! Every draw is addressed by `(master seed, channel, stream)`: the master
//! seed and channel key a ChaCha8 generator and the stream index selects one
//! of its 2^64 independent streams. A path therefore sees the same numbers no
//! matter which worker runs it or in which order, and two simulations sharing
//! a seed share their market noise.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc_inv;

/// Independent noise sources of one simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    /// Increments of the observable Brownian motion driving prices and the filter.
    Market,
    /// Increments of the auxiliary Brownian motion of the exploratory dynamics.
    Exploration,
    /// Standard normals behind the leader's sampled actions.
    Sampling,
    /// Noise of the reference paths that generate frozen action sequences.
    Reference,
}

impl Channel {
    fn tag(self) -> u64 {
        match self {
            Channel::Market => 0,
            Channel::Exploration => 1,
            Channel::Sampling => 2,
            Channel::Reference => 3,
        }
    }
}

/// Standard normal quantile of a uniform built from the top 53 bits of `bits`.
///
/// The uniform is centred in its bucket, so it lies strictly inside (0, 1).
#[inline]
pub fn normal_from_bits(bits: u64) -> f64 {
    const HALF: u64 = 1 << 52;
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let k = bits >> 11;
    // Work with the smaller tail probability, which erfc_inv resolves fully
    // and which is exactly representable on both sides of one half.
    if k < HALF {
        let lower = (k as f64 + 0.5) * SCALE;
        -std::f64::consts::SQRT_2 * erfc_inv(2.0 * lower)
    } else {
        let upper = ((2 * HALF - 1 - k) as f64 + 0.5) * SCALE;
        std::f64::consts::SQRT_2 * erfc_inv(2.0 * upper)
    }
}

/// A stream of standard normal draws.
#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn new(seed: u64, channel: Channel, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&channel.tag().to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        NormalStream { rng }
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        normal_from_bits(self.rng.next_u64())
    }

    /// Fills `out` with consecutive draws.
    pub fn fill(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.next_normal();
        }
    }

    /// Number of 64-bit words consumed so far.
    pub fn position(&self) -> u128 {
        // ChaCha emits 32-bit words; each draw takes two.
        self.rng.get_word_pos() / 2
    }
}
