//! Eager, graph-free entry points for the architectural primitives.

use crate::error::Result;
use crate::faces::{FaceLatentBatch, CUBE_FACES};
use crate::graph::Graph;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Group norm of a face batch. Unsynchronized statistics cover
/// `(channels in group, h, w)` per `(b, t)`; synchronized statistics cover
/// `(channels in group, t, h, w)` per `b`. `scale` and `bias` are `[c]`.
pub fn group_norm<T: Real>(
    x: &FaceLatentBatch<T>,
    groups: usize,
    eps: f64,
    synchronized: bool,
    scale: &[T],
    bias: &[T],
) -> Result<FaceLatentBatch<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.to_images())?;
    let gamma = g.constant(Tensor::new(&[scale.len()], scale.to_vec())?)?;
    let beta = g.constant(Tensor::new(&[bias.len()], bias.to_vec())?)?;
    let y = g.group_norm(xv, gamma, beta, groups, CUBE_FACES, synchronized, eps)?;
    FaceLatentBatch::from_images(g.value(y).clone())
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v / (T::one() + (-v).exp()))
}
