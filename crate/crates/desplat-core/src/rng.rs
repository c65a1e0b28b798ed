//! Deterministic counter-based random streams.
//!
//! Every consumer addresses randomness as `(seed, stream, counter)`: the
//! stream id picks an independent sequence, the counter a position inside it.
//! Draws therefore never depend on evaluation order, which is what lets
//! per-primitive updates run in any order (or in parallel) without changing
//! a trajectory.

use crate::math::{cos, ln, sin, sqrt, Vec3};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// Stream ids 0..16 are reserved for scene-level consumers; primitives are
/// handed ids starting here.
pub const FIRST_PRIMITIVE_STREAM: u64 = 16;
/// Reserved stream: relocation target sampling.
pub const STREAM_RELOCATE: u64 = 0;
/// Reserved stream: synthetic ground-truth generation.
pub const STREAM_SYNTH_GT: u64 = 2;
/// Reserved stream: synthetic initialization jitter.
pub const STREAM_SYNTH_INIT: u64 = 3;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn stream_key(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_mul(GAMMA) ^ STREAM_SALT))
}

/// One random stream positioned at a counter.
#[derive(Debug, Clone)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::at(seed, stream, 0)
    }

    /// Stream positioned at an explicit counter; used to address per-step
    /// draw blocks without carrying mutable state between steps.
    pub fn at(seed: u64, stream: u64, counter: u64) -> Self {
        Self {
            key: stream_key(seed, stream),
            counter,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = c.wrapping_add(1);
        mix(self.key.wrapping_add(c.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in (0, 1]; safe under `ln`.
    #[inline]
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    #[inline]
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in [0, n); unbiased enough for simulation use.
    #[inline]
    pub fn next_index(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal pair via Box-Muller.
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        let r = sqrt(-2.0 * ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        (r * cos(theta), r * sin(theta))
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        self.next_normal_pair().0
    }

    pub fn next_normal3(&mut self) -> Vec3 {
        let (a, b) = self.next_normal_pair();
        let (c, _) = self.next_normal_pair();
        Vec3::new(a, b, c)
    }

    /// Unit quaternion uniform on SO(3) (Shoemake's method), returned as
    /// (w, x, y, z) components.
    pub fn next_unit_quat(&mut self) -> [f64; 4] {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let u3 = self.next_f64();
        let tau = 2.0 * core::f64::consts::PI;
        let a = sqrt(1.0 - u1);
        let b = sqrt(u1);
        [
            b * cos(tau * u3),
            a * sin(tau * u2),
            a * cos(tau * u2),
            b * sin(tau * u3),
        ]
    }
}
