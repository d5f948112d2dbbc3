use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tensor::{Real, Tensor};

/// Uniform `±sqrt(6 / (fan_in + fan_out))` initialisation.
pub fn xavier_uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    uniform(rng, shape, bound)
}

pub fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
