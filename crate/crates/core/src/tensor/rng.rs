use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Scalar, Tensor};

/// Seedable random source.
///
/// Backed by ChaCha8, whose output stream is fully specified and therefore
/// identical across platforms for a given seed. Normal samples are drawn in
/// `f64` and narrowed, so 32- and 64-bit tensors drawn from the same seed
/// agree up to rounding.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator derived from this one's seed and `stream`.
    /// Does not advance `self`.
    /// Forks of forks are distinct from direct forks.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(stream.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// I.i.d. `Normal(mean, std)` samples. `std == 0` yields a constant tensor
    /// without consuming randomness.
    pub fn normal<S: Scalar>(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor<S> {
        assert!(std >= 0.0, "negative standard deviation {std}");
        let n: usize = shape.iter().product();
        let data = if std == 0.0 {
            vec![S::of(mean); n]
        } else {
            (0..n).map(|_| S::of(mean + std * self.standard_normal())).collect()
        };
        Tensor::new(shape, data).expect("length matches shape")
    }
}
