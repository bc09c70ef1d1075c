//! Reverse-mode tensor core for multi-view latent diffusion.
//!
//! Tensors are dense and row-major. A [`Graph`] records operations eagerly
//! and differentiates them in reverse. Besides the usual convolution, linear
//! and activation ops it provides the two multi-view primitives: group norm
//! whose statistics can be synchronized across cube faces, and attention
//! whose token sequence can be inflated from `b x (hw) x l` to
//! `b x (thw) x l`, with optional key masking for dropped conditions.
//!
//! All reductions run sequentially in canonical index order, so results are
//! bit-reproducible for a given input.

pub mod error;
pub mod faces;
pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod mask;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use faces::{FaceLatentBatch, CUBE_FACES};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{Bound, Conv2d, CrossAttention, GroupNorm, Linear, ParamId, ParamStore, SelfAttention, TextLayout};
pub use mask::{condition_attention_mask, AttentionMask, AttentionScope};
pub use optim::Adam;
pub use scalar::Real;
pub use tensor::Tensor;
