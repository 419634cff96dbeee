//! Seeded deterministic randomness and parameter initialization.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

/// ChaCha8 stream keyed by a 64-bit seed. ChaCha output is specified
/// bit-for-bit, so draws are identical across platforms.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
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

    /// Independent stream derived from this generator's seed.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self { seed: self.seed, inner }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// Uniform on `[-a, a)`.
    Uniform(f64),
    Zeros,
    Ones,
}

pub fn init_params<T: Scalar>(rng: &mut Rng, shape: &[usize], scheme: InitScheme) -> Tensor<T> {
    match scheme {
        InitScheme::Normal(std) => Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.normal(0.0, std))),
        InitScheme::Uniform(a) => Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.uniform(-a, a))),
        InitScheme::Zeros => Tensor::zeros(shape.to_vec()),
        InitScheme::Ones => Tensor::ones(shape.to_vec()),
    }
}
