use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Seeded parameter initializer. Parameters must be requested in a fixed
/// order for results to be reproducible.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std) truncated to ±2·std by resampling.
    pub fn trunc_normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let normal = Normal::new(0.0, std).expect("std is positive");
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| loop {
                let v: f64 = normal.sample(&mut self.rng);
                if v.abs() <= 2.0 * std {
                    break v as f32;
                }
            })
            .collect();
        Tensor::new(shape, data).expect("length matches shape")
    }

    /// He-style normal for layers followed by a rectifier.
    pub fn kaiming(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        self.trunc_normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    /// Glorot-style normal, variance `2 / (fan_in + fan_out)`.
    pub fn xavier(&mut self, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
        self.trunc_normal(shape, (2.0 / (fan_in + fan_out) as f64).sqrt())
    }

    pub fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        Tensor::new(shape, data).expect("length matches shape")
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        Tensor::zeros(shape)
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, vec![1.0; len]).expect("length matches shape")
    }
}
