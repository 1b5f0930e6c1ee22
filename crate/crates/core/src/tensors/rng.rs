use rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::Tensor;

/// Seeded pseudorandom stream.
///
/// The generator is xoshiro256++ (Blackman & Vigna). Its 256-bit state is
/// expanded from the 64-bit seed with SplitMix64:
///
/// ```text
/// z  = (s += 0x9e3779b97f4a7c15)
/// z  = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
/// z  = (z ^ (z >> 27)) * 0x94d049bb133111eb
/// out = z ^ (z >> 31)
/// ```
///
/// and each output is `rotl(s0 + s3, 23) + s0` followed by the standard
/// xoshiro256 state update. Derived quantities are built from `next_u64`
/// only, with the formulas documented on each method, so any implementation
/// of xoshiro256++ reproduces the engine's streams.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Independent child stream, keyed by `stream`.
    ///
    /// The child seed is `next_u64() ^ stream * 0x9e3779b97f4a7c15`.
    pub fn fork(&mut self, stream: u64) -> Rng {
        Rng::new(self.next_u64() ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`: `(next_u64() >> 11) · 2⁻⁵³`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection on the top of the `u64` range.
    /// Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box–Muller, using the cosine branch only:
    /// `sqrt(-2 ln(1 - u1)) · cos(2π u2)`.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_tensor(&mut self, dims: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(dims, |_| (self.normal() * std) as f32)
    }

    pub fn uniform_tensor(&mut self, dims: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(dims, |_| (lo + (hi - lo) * self.next_f64()) as f32)
    }
}
