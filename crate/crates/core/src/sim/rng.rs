//! Counter-based deterministic random streams.
//!
//! Every draw is a pure hash of (seed, key triple, lane), so streams
//! are order-independent: adding a vehicle or a sensor channel never
//! perturbs the noise another stream sees, and any draw can be
//! recomputed in isolation. Output is stable across runs on the same
//! platform, which the replay/determinism contracts rely on.
//! Not cryptographic.

/// Stateless keyed generator over a fixed seed.
#[derive(Debug, Clone, Copy)]
pub struct StreamRng {
    seed: u64,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw 64-bit draw for (keys, lane).
    #[inline]
    pub fn next_u64(&self, keys: [u64; 3], lane: u64) -> u64 {
        let mut h = mix64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        h = mix64(h ^ keys[0].wrapping_mul(0xa24b_aed4_963e_e407));
        h = mix64(h ^ keys[1].wrapping_mul(0x9fb2_1c65_1e98_df25));
        h = mix64(h ^ keys[2].wrapping_mul(0xd6e8_feb8_6659_fd93));
        mix64(h ^ lane.wrapping_mul(0xff51_afd7_ed55_8ccd))
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&self, keys: [u64; 3]) -> f64 {
        (self.next_u64(keys, 0) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on two lanes of the same key.
    #[inline]
    pub fn gauss(&self, keys: [u64; 3]) -> f64 {
        // u1 in (0, 1] so the log stays finite.
        let u1 = ((self.next_u64(keys, 0) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64(keys, 1) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
