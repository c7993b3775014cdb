//! Seeded pseudo-random streams with stable substream derivation.
//!
//! SplitMix64 (Steele, Lea, Flood 2014): the state advances by a fixed odd
//! increment and each output is a finalizing mix of the new state. Not
//! cryptographic; chosen for bit-stable cross-platform behavior and cheap,
//! collision-resistant substream splitting.
//!
//! Substreams derive from the *construction seed*, never from the mutable
//! state, so `substream(i)` yields the same stream regardless of how many
//! draws preceded it. Decoding keys one substream per iteration and one
//! sub-substream per grid position; draw order within a position is fixed
//! (categorical uniform first, Gumbel uniform second). Consumption is thereby
//! independent of cache policy, guidance, and processing order, which is what
//! makes cache-equivalence bit-exact.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Clamp for uniform draws feeding logarithms; documented contract for
/// [`crate::numerics::gumbel_noise`].
pub const UNIFORM_CLAMP: f64 = 1e-12;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct Rng {
    base: u64,
    state: u64,
}

impl Rng {
    #[must_use]
    pub fn new(seed: u64) -> Self {
        Rng { base: seed, state: seed }
    }

    /// Seed this stream was constructed with (substream derivation key).
    #[must_use]
    pub fn seed(&self) -> u64 {
        self.base
    }

    /// Child stream `index`, a pure function of the construction seed.
    #[must_use]
    pub fn substream(&self, index: u64) -> Rng {
        Rng::new(mix64(self.base ^ GAMMA.wrapping_mul(index.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval, clamped to `[1e-12, 1 - 1e-12]` so both
    /// `ln(u)` and `ln(1 - u)` stay finite.
    pub fn next_open01(&mut self) -> f64 {
        self.next_f64().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    }

    /// Standard normal via Box-Muller (two uniforms per draw, no caching).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal truncated to two standard deviations, then scaled: draws outside
    /// `[-2, 2]` are rejected and resampled.
    pub fn next_trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.next_normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Uniform integer in `[0, bound)` by 64-bit multiply-shift.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }
}

// =============================================================================
// Tests
// =============================================================================
