//! SplitMix64 generator with keyed substreams.
//!
//! Every random decision in the pipeline draws from a stream derived from a
//! tuple of integers (seed, epoch, step, image, patch, transform, ...). Streams
//! are addressed by key rather than by call order, so results do not depend on
//! how work is split across threads.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
    key: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::from_key(seed, &[])
    }

    /// Stream addressed by `seed` and an ordered list of integer keys.
    pub fn from_key(seed: u64, keys: &[u64]) -> Self {
        let mut h = mix(seed.wrapping_add(GOLDEN));
        for (i, &k) in keys.iter().enumerate() {
            h = mix(h ^ mix(k.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 2))));
        }
        Self { state: h, key: h }
    }

    /// Child stream keyed by `tag`; independent of how many values have been
    /// drawn from `self`.
    pub fn derive(&self, tag: u64) -> Self {
        Self::from_key(self.key, &[tag])
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (`n > 0`).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        p > 0.0 && (p >= 1.0 || self.uniform() < p)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
