//! Counter-based deterministic PRNG.
//!
//! Model weights are generated as a pure function of
//! `(seed, stream, counter)` so that rebuilding a model from the same
//! config is bit-identical, independent of construction order. The same
//! mixer backs a small stateful generator used for prompts and test
//! case generation.

/// SplitMix64 finalizer. Full-avalanche mixing of a 64-bit word.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed, a stream id, and a counter into one pseudo-random word.
#[inline]
pub fn mix(seed: u64, stream: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ counter)
}

/// Uniform value in `[-scale, scale)` from the counter-based mixer.
#[inline]
pub fn uniform_f32(seed: u64, stream: u64, counter: u64, scale: f32) -> f32 {
    // Top 24 bits give the full f32 significand resolution.
    let bits = mix(seed, stream, counter) >> 40;
    let unit = bits as f32 / (1u32 << 24) as f32; // [0, 1)
    (2.0 * unit - 1.0) * scale
}

/// Small stateful generator for prompts and randomized test cases.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: splitmix64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        splitmix64(self.state)
    }

    /// Uniform in `[0, bound)`. `bound` must be nonzero.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        // Multiply-shift range reduction; bias is negligible for the
        // small bounds used here.
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_is_pure() {
        assert_eq!(mix(7, 3, 99), mix(7, 3, 99));
        assert_ne!(mix(7, 3, 99), mix(7, 3, 100));
        assert_ne!(mix(7, 3, 99), mix(7, 4, 99));
        assert_ne!(mix(7, 3, 99), mix(8, 3, 99));
    }

    #[test]
    fn uniform_stays_in_range() {
        for c in 0..10_000 {
            let v = uniform_f32(42, 1, c, 0.25);
            assert!((-0.25..0.25).contains(&v), "{v}");
        }
    }

    #[test]
    fn rng_bound_respected() {
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            assert!(rng.next_below(7) < 7);
        }
    }
}
