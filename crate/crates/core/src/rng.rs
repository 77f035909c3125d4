//! Seeded, platform-reproducible random streams.
//!
//! The generator is ChaCha20 (`rand_chacha`), which is a counter-based
//! stream cipher: the output for a given `(seed, stream)` pair is fixed by
//! the algorithm and identical on every platform. Normal variates come from
//! the Box-Muller transform over 53-bit uniforms, implemented here so the
//! mapping from bits to samples never depends on an external crate's
//! sampling code.

use std::f64::consts::TAU;

use rand_chacha::ChaCha20Rng;
use rand_core::{Rng as _, SeedableRng};

use crate::tensor::{s, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream derived from this generator's seed. Forking does
    /// not advance `self`, so the same `(seed, stream)` always yields the same
    /// child regardless of how much the parent has been consumed.
    pub fn fork(&self, stream: u64) -> Rng {
        Self::with_stream(self.seed, stream.wrapping_add(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection sampling.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        self.spare_normal = Some(radius * (TAU * u2).sin());
        radius * (TAU * u2).cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = s(self.normal(mean, std));
        }
        t
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. `Normal(0, 2 / fan_in)` samples (He/Kaiming normal initialization).
pub fn kaiming_normal<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor<T> {
    assert!(fan_in >= 1, "kaiming_normal requires fan_in >= 1");
    let std = (2.0 / fan_in as f64).sqrt();
    rng.normal_tensor(&[rows, cols], 0.0, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(8);
        assert_ne!(Rng::new(7).next_u64(), c.next_u64());
    }

    #[test]
    fn fork_ignores_parent_progress() {
        let parent = Rng::new(3);
        let mut advanced = parent.clone();
        advanced.next_u64();
        assert_eq!(parent.fork(5).next_u64(), advanced.fork(5).next_u64());
        assert_ne!(parent.fork(5).next_u64(), parent.fork(6).next_u64());
    }

    #[test]
    fn below_and_shuffle() {
        let mut rng = Rng::new(1);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[rng.below(3)] += 1;
        }
        assert!(counts.iter().all(|&c| (850..1150).contains(&c)), "{counts:?}");

        let mut v: Vec<usize> = (0..20).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn kaiming_variance_and_mean() {
        let mut rng = Rng::new(2024);
        let t: Tensor<f64> = kaiming_normal(&mut rng, 100, 100, 768);
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / 768.0;
        assert!((var / target - 1.0).abs() < 0.15, "var {var} target {target}");
        assert!(mean.abs() < 3.0 * target.sqrt() / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn kaiming_deterministic() {
        let a: Tensor<f32> = kaiming_normal(&mut Rng::new(9), 4, 5, 5);
        let b: Tensor<f32> = kaiming_normal(&mut Rng::new(9), 4, 5, 5);
        assert_eq!(a, b);
    }
}
