//! Seedable random source used by every stochastic operation.
//!
//! The generator is PCG64 (128-bit LCG with XSL-RR output). A `(seed, stream)`
//! pair maps to the PCG state `splitmix64(seed) << 64 | splitmix64(!seed)` and
//! the PCG increment stream `stream`, so distinct streams of one seed never
//! overlap. Floats are built from the top 53 bits of each 64-bit draw.

use rand_core::Rng as _;
use rand_pcg::Pcg64;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: Pcg64,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Independent generator for `stream` under the same master `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let state = ((splitmix64(seed) as u128) << 64) | splitmix64(!seed) as u128;
        Self {
            inner: Pcg64::new(state, stream as u128),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`.
    pub fn open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // multiply-shift; bias is below 2^-64 * n
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.open01();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Standard Gumbel sample `-ln(-ln u)`.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.open01().ln()).ln()
    }
}
