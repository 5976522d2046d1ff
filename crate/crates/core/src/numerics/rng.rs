//! Seeded random number generation.
//!
//! The generator is ChaCha8 (`rand_chacha`), a counter-based stream cipher:
//! output block `n` is a pure function of `(seed, stream, n)`, so sample
//! streams are bit-identical across runs and platforms. Gaussian samples use
//! the `rand_distr` ziggurat sampler on top of that stream.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
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

    /// Independent stream derived from the same seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.inner);
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: impl Into<Vec<usize>>, std: f64) -> Tensor<T> {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.normal() * std))
            .collect();
        Tensor::new(shape, data).expect("shape/product agree")
    }

    pub fn uniform_tensor<T: Scalar>(
        &mut self,
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
    ) -> Tensor<T> {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.uniform_range(lo, hi)))
            .collect();
        Tensor::new(shape, data).expect("shape/product agree")
    }
}
