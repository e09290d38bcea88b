use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Seeded ChaCha8 stream. Samples are drawn in f64 and converted to the
/// target precision, so a seed yields the same stream for every dtype.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this seed and a tag.
    pub fn fork(&self, tag: u64) -> Self {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03);
        Self::new(mixed)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform on `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates from the back, using our own draw so the permutation
        // only depends on the generator stream.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. `N(mean, std²)` samples.
pub fn sample_gaussian<T: Real>(
    rng: &mut SeededRng,
    shape: &[usize],
    mean: f64,
    std: f64,
) -> Result<Tensor<T>> {
    if !(std >= 0.0) {
        return Err(Error::arg(format!("gaussian std must be >= 0, got {std}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(mean + std * rng.normal())).collect();
    Tensor::new(shape.to_vec(), data)
}

/// I.i.d. `U(lo, hi)` samples.
pub fn sample_uniform<T: Real>(
    rng: &mut SeededRng,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Result<Tensor<T>> {
    if !(lo <= hi) {
        return Err(Error::arg(format!("uniform bounds inverted: {lo} > {hi}")));
    }
    let n: usize = shape.iter().product();
    let width = hi - lo;
    let data = (0..n).map(|_| T::of(lo + width * rng.unit())).collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    const N: usize = 1_000_000;

    fn mean_std(t: &Tensor<f64>) -> (f64, f64) {
        let n = t.len() as f64;
        let m = t.data().iter().sum::<f64>() / n;
        let v = t.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        (m, v.sqrt())
    }

    #[test]
    fn degenerate_distributions_are_constant() {
        let mut rng = SeededRng::new(1);
        let g: Tensor<f64> = sample_gaussian(&mut rng, &[4], 2.5, 0.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 2.5));
        let u: Tensor<f32> = sample_uniform(&mut rng, &[4], -3.0, -3.0).unwrap();
        assert!(u.data().iter().all(|&v| v == -3.0));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut rng = SeededRng::new(1);
        assert!(matches!(
            sample_gaussian::<f64>(&mut rng, &[2], 0.0, -1.0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            sample_uniform::<f64>(&mut rng, &[2], 1.0, 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = SeededRng::new(42);
        let t: Tensor<f64> = sample_gaussian(&mut rng, &[N], 0.0, 1.0).unwrap();
        let (m, s) = mean_std(&t);
        assert!(m.abs() < 0.01, "mean {m}");
        assert!((s - 1.0).abs() < 0.01, "std {s}");
        let abs_mean = t.data().iter().map(|v| v.abs()).sum::<f64>() / N as f64;
        let expected = (2.0 / std::f64::consts::PI).sqrt();
        assert!((abs_mean / expected - 1.0).abs() < 0.01, "E|W| {abs_mean}");
    }

    #[test]
    fn uniform_moments() {
        let mut rng = SeededRng::new(43);
        let t: Tensor<f64> = sample_uniform(&mut rng, &[N], -1.0, 1.0).unwrap();
        let abs_mean = t.data().iter().map(|v| v.abs()).sum::<f64>() / N as f64;
        assert!((abs_mean / 0.5 - 1.0).abs() < 0.01);
        let t: Tensor<f64> = sample_uniform(&mut rng, &[N], 0.0, 1.0).unwrap();
        assert!((mean_std(&t).0 / 0.5 - 1.0).abs() < 0.01);
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Tensor<f64> = sample_gaussian(&mut SeededRng::new(7), &[64], 0.0, 1.0).unwrap();
        let b: Tensor<f64> = sample_gaussian(&mut SeededRng::new(7), &[64], 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        let c: Tensor<f32> = sample_gaussian(&mut SeededRng::new(7), &[64], 0.0, 1.0).unwrap();
        assert_eq!(c, a.cast::<f32>());
        let mut r = SeededRng::new(7);
        let mut v: Vec<u32> = (0..20).collect();
        r.shuffle(&mut v);
        let mut r2 = SeededRng::new(7);
        let mut w: Vec<u32> = (0..20).collect();
        r2.shuffle(&mut w);
        assert_eq!(v, w);
    }
}
