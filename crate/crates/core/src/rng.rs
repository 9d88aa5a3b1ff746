//! Counter-based 64-bit generator.
//!
//! A stream is a `(key, counter)` pair; draw `i` of a stream is
//! `mix64(key + (i + 1) * GOLDEN_GAMMA)`, where `mix64` is the SplitMix64
//! finaliser. Nothing else is hidden in the state, so any implementation that
//! reproduces these constants reproduces every stream bit for bit.
//!
//! Substreams are keyed by `derive_key(seed, index) = mix64(seed ^ mix64(index + STREAM_SALT))`.
//!
//! Uniform doubles take the top 53 bits: `(x >> 11) * 2^-53`, giving `[0, 1)`.
//! Normal variates use Box-Muller with `u1 = 1 - uniform()` (so `u1` is in
//! `(0, 1]`) drawn first, then `u2 = uniform()`, and return only the cosine
//! branch `sqrt(-2 ln u1) * cos(2 pi u2)`: every normal consumes exactly two draws.

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
pub const MIX_MUL_1: u64 = 0xBF58_476D_1CE4_E5B9;
pub const MIX_MUL_2: u64 = 0x94D0_49BB_1331_11EB;
pub const STREAM_SALT: u64 = 0xD1B5_4A32_D192_ED03;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

/// Key for substream `index` of `seed`.
#[inline]
pub fn derive_key(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(STREAM_SALT)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn substream(seed: u64, index: u64) -> Self {
        Self::new(derive_key(seed, index))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive. Uses a widening multiply.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
