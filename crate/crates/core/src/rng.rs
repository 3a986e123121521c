//! Reproducible random streams for dataset generation.
//!
//! The generator is SplitMix64: a 64-bit counter advanced by the golden-ratio
//! increment and passed through a fixed finalizer. Uniform doubles take the
//! top 53 bits, so a seed pins every drawn value bit-exactly in any language.

/// 2^64 / φ, the SplitMix64 counter increment.
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer (Stafford variant 13).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `k`-th sample stream: `mix64(seed ^ GOLDEN_GAMMA·(k+1))`.
///
/// Depends only on `(seed, k)`, so samples can be generated in any order.
pub fn child_seed(seed: u64, k: u64) -> u64 {
    mix64(seed ^ GOLDEN_GAMMA.wrapping_mul(k.wrapping_add(1)))
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)`: `(x >> 11) · 2⁻⁵³`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-amp, amp)`: `amp · (2u − 1)`.
    #[inline]
    pub fn symmetric(&mut self, amp: f64) -> f64 {
        amp * (2.0 * self.next_f64() - 1.0)
    }
}
