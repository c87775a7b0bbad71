use super::{Rng, Tensor};

/// Gaussian init with the given standard deviation.
pub fn normal(shape: &[usize], std: f32, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.normal() * std;
    }
    t
}

/// Xavier/Glorot uniform for a `[fan_in, fan_out]` weight.
pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let mut t = Tensor::zeros(&[fan_in, fan_out]);
    for v in t.data_mut() {
        *v = (rng.uniform() * 2.0 - 1.0) * a;
    }
    t
}
