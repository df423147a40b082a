use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::scalar::Scalar;

/// Seeded ChaCha8 stream. The ChaCha8 keystream is fixed by its
/// definition, so a seed yields the same values on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` under the same seed. Used to make
    /// per-step randomness a pure function of `(seed, step)`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Standard-normal tensor.
    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.normal()))
    }

    /// Normal tensor with the given standard deviation.
    pub fn normal_scaled<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.normal() * std))
    }
}

/// Samples `n` standard-normal values into a shaped tensor.
pub fn rng_normal<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    rng.normal_tensor(shape)
}
