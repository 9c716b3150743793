//! SplitMix64, the generator behind every synthetic weight and random draw.
//!
//! Reference definition (reproducible in any language):
//!
//! ```text
//! state = state + 0x9E37_79B9_7F4A_7C15            (wrapping)
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9        (wrapping)
//! z = (z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB        (wrapping)
//! return z ^ (z >> 31)
//! ```
//!
//! `next_f32` maps the top 24 bits of a draw to `[0, 1)`; `uniform` maps that
//! to `[-1, 1)` via `2u - 1`.

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in `[-1, 1)`.
    pub fn uniform(&mut self) -> f32 {
        2.0 * self.next_f32() - 1.0
    }

    /// Uniform integer in `0..n`. Modulo bias is negligible for the small `n`
    /// used here.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn fill_uniform(&mut self, out: &mut [f32], scale: f32) {
        for x in out {
            *x = self.uniform() * scale;
        }
    }
}
