//! Seeded, splittable random streams for the problem generators.
//!
//! Every array a generator draws comes from its own `(seed, stream)` pair, so
//! instances are bit-reproducible and changing one array's size never
//! reshuffles another. The key derivation and the variate conventions are
//! fixed:
//!
//! * stream key: four `splitmix64` outputs of `seed ^ (stream+1) * 0x9E3779B97F4A7C15`,
//!   little-endian, feeding a ChaCha12 block cipher RNG;
//! * `uniform()` maps the top 53 bits of a `u64` draw to `[0, 1)`;
//! * `normal()` is Box-Muller on `(u1, u2]` pairs, cosine variate first,
//!   sine variate cached for the next call.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// One independent random stream.
pub struct StreamRng {
    rng: ChaCha12Rng,
    spare_normal: Option<f64>,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut state = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E3779B97F4A7C15);
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        StreamRng { rng: ChaCha12Rng::from_seed(key), spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn uniform_vec_in(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform_in(lo, hi)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let a: Vec<u64> = (0..16).map(|_| StreamRng::new(1, 0).next_u64()).collect();
        let b: Vec<u64> = (0..16).map(|_| StreamRng::new(1, 0).next_u64()).collect();
        assert_eq!(a, b);
        let mut s0 = StreamRng::new(1, 0);
        let mut s1 = StreamRng::new(1, 1);
        assert_ne!(s0.next_u64(), s1.next_u64());
        let mut t = StreamRng::new(2, 0);
        assert_ne!(StreamRng::new(1, 0).next_u64(), t.next_u64());
    }

    #[test]
    fn normal_moments_sane() {
        let mut rng = StreamRng::new(42, 9);
        let n = 200_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = StreamRng::new(3, 3);
        for _ in 0..1000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
