//! Seeded parameter initialization.

use rand::Rng;

use super::tensor::Tensor;

/// Glorot-uniform sample over `[-limit, limit]` with
/// `limit = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-limit..limit))
        .collect::<Vec<_>>();
    Tensor::from_vec(shape, data).expect("shape/product agree")
}

/// Fan counts for a `[K, C, s, s]` convolution filter bank.
pub fn conv_fans(in_ch: usize, out_ch: usize, kernel: usize) -> (usize, usize) {
    (in_ch * kernel * kernel, out_ch * kernel * kernel)
}
