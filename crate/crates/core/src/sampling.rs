//! Seeded random and quasi-random point generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn rng(seed: u64, stream: u64) -> SeededRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn normal(r: &mut SeededRng) -> f64 {
    r.sample(StandardNormal)
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    out
}

/// Randomly shifted (Cranley–Patterson) Halton sequence in `[0,1)^dim`.
#[derive(Debug, Clone)]
pub struct ShiftedHalton {
    shift: Vec<f64>,
}

impl ShiftedHalton {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim <= PRIMES.len(), "Halton dimension limited to {}", PRIMES.len());
        let mut r = rng(seed, 0x4841);
        Self { shift: (0..dim).map(|_| r.random::<f64>()).collect() }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// Point number `i` (the sequence skips index 0).
    pub fn point(&self, i: usize) -> Vec<f64> {
        self.shift
            .iter()
            .enumerate()
            .map(|(d, s)| {
                let u = radical_inverse(i as u64 + 1, PRIMES[d]) + s;
                let u = u - u.floor();
                // keep strictly inside (0,1) for inverse-CDF maps
                u.clamp(1e-15, 1.0 - 1e-15)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert!((radical_inverse(5, 3) - (2.0 / 3.0 + 1.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn halton_mean_is_half() {
        let h = ShiftedHalton::new(3, 9);
        let n = 4096;
        let mut m = [0.0; 3];
        for i in 0..n {
            for (d, x) in h.point(i).iter().enumerate() {
                m[d] += x / n as f64;
            }
        }
        for x in m {
            assert!((x - 0.5).abs() < 2e-3);
        }
    }

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<f64> = (0..4).map(|_| normal(&mut rng(1, 2))).collect();
        let b: Vec<f64> = (0..4).map(|_| normal(&mut rng(1, 2))).collect();
        assert_eq!(a, b);
    }
}
