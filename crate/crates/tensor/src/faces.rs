use crate::error::{shape_err, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Number of cube faces carried by a [`FaceLatentBatch`].
pub const CUBE_FACES: usize = 6;

/// A `[b, t, c, h, w]` tensor holding one latent per cube face, `t = 6`.
///
/// Convolutions see it as `b * t` independent images; group norm and
/// inflated attention see the face axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceLatentBatch<T> {
    tensor: Tensor<T>,
}

impl<T: Real> FaceLatentBatch<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 5 || s[1] != CUBE_FACES {
            return Err(shape_err(
                "FaceLatentBatch",
                format!("expected [b, {CUBE_FACES}, c, h, w], got {s:?}"),
            ));
        }
        Ok(FaceLatentBatch { tensor })
    }

    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        FaceLatentBatch { tensor: Tensor::zeros(&[b, CUBE_FACES, c, h, w]) }
    }

    pub fn from_images(images: Tensor<T>) -> Result<Self> {
        let s = images.shape().to_vec();
        if s.len() != 4 || s[0] % CUBE_FACES != 0 {
            return Err(shape_err("FaceLatentBatch::from_images", format!("{s:?}")));
        }
        Self::new(images.reshape(&[s[0] / CUBE_FACES, CUBE_FACES, s[1], s[2], s[3]])?)
    }

    /// `(b, t, c, h, w)`.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.tensor.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }

    pub fn batch(&self) -> usize {
        self.tensor.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim(2)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    /// The same data viewed as `[b * t, c, h, w]`.
    pub fn to_images(&self) -> Tensor<T> {
        let (b, t, c, h, w) = self.dims();
        self.tensor.clone().reshape(&[b * t, c, h, w]).expect("same numel")
    }

    /// Flattened `[c, h, w]` block for one face of one batch row.
    pub fn face(&self, b: usize, f: usize) -> &[T] {
        let n = self.face_len();
        let start = (b * CUBE_FACES + f) * n;
        &self.tensor.data()[start..start + n]
    }

    pub fn face_mut(&mut self, b: usize, f: usize) -> &mut [T] {
        let n = self.face_len();
        let start = (b * CUBE_FACES + f) * n;
        &mut self.tensor.data_mut()[start..start + n]
    }

    pub fn face_len(&self) -> usize {
        let (_, _, c, h, w) = self.dims();
        c * h * w
    }
}
