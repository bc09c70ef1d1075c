//! Deterministic stand-in for a caption encoder.

use cubepano_tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::stream;

/// `tokens x dim` matrix of unit-norm pseudo-random vectors seeded by the
/// caption text. The empty caption is the null condition: all zeros.
pub fn toy_text_embed(caption: &str, tokens: usize, dim: usize) -> Tensor<f64> {
    if caption.is_empty() {
        return Tensor::zeros(&[tokens, dim]);
    }
    let mut data = Vec::with_capacity(tokens * dim);
    for t in 0..tokens {
        let mut r = stream(0, &format!("caption:{caption}"), &[t as u64]);
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    Tensor::new(&[tokens, dim], data).expect("token matrix shape")
}
