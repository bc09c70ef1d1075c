//! Fixed pixel-latent codec: space-to-depth with values mapped to `[-1, 1]`.

use cubepano_tensor::{FaceLatentBatch, Real, Tensor};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::projection::CubemapImage;

/// Folds each `factor x factor` pixel block into channels. Latent channel
/// `(c * factor + dy) * factor + dx` holds `2 * pixel - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelCodec {
    pub factor: usize,
    pub image_channels: usize,
}

impl PixelCodec {
    pub fn new(factor: usize, image_channels: usize) -> Result<Self> {
        if factor == 0 || image_channels == 0 {
            return Err(Error::Config("codec factor and channels must be positive".into()));
        }
        Ok(PixelCodec { factor, image_channels })
    }

    pub fn latent_channels(&self) -> usize {
        self.image_channels * self.factor * self.factor
    }

    pub fn latent_size(&self, face_size: usize) -> Result<usize> {
        if face_size % self.factor != 0 {
            return Err(Error::Config(format!("face size {face_size} not divisible by {}", self.factor)));
        }
        Ok(face_size / self.factor)
    }

    /// Writes one face into a `[latent_channels, n, n]` slice.
    pub fn encode_face<T: Real>(&self, img: &Image, out: &mut [T]) -> Result<()> {
        let n = self.latent_size(img.width)?;
        let f = self.factor;
        if img.channels != self.image_channels || img.height != img.width || out.len() != self.latent_channels() * n * n {
            return Err(Error::Config("face does not match the codec".into()));
        }
        for c in 0..img.channels {
            for dy in 0..f {
                for dx in 0..f {
                    let lc = (c * f + dy) * f + dx;
                    for i in 0..n {
                        for j in 0..n {
                            let v = img.pixel(i * f + dy, j * f + dx)[c];
                            out[(lc * n + i) * n + j] = T::of(2.0 * v - 1.0);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn decode_face<T: Real>(&self, lat: &[T], n: usize) -> Image {
        let f = self.factor;
        let s = n * f;
        let mut img = Image::filled(s, s, &vec![0.0; self.image_channels]);
        for c in 0..self.image_channels {
            for dy in 0..f {
                for dx in 0..f {
                    let lc = (c * f + dy) * f + dx;
                    for i in 0..n {
                        for j in 0..n {
                            img.pixel_mut(i * f + dy, j * f + dx)[c] = (lat[(lc * n + i) * n + j].f64() + 1.0) / 2.0;
                        }
                    }
                }
            }
        }
        img
    }

    /// Stacks cubemaps into a `[b, 6, c, n, n]` batch.
    pub fn encode<T: Real>(&self, cubemaps: &[&CubemapImage]) -> Result<FaceLatentBatch<T>> {
        let first = cubemaps.first().ok_or_else(|| Error::Config("no cubemaps to encode".into()))?;
        let n = self.latent_size(first.face_size())?;
        let mut batch = FaceLatentBatch::zeros(cubemaps.len(), self.latent_channels(), n, n);
        for (b, cm) in cubemaps.iter().enumerate() {
            if cm.face_size() != first.face_size() {
                return Err(Error::Config("cubemaps in a batch must share a face size".into()));
            }
            for (f, face) in cm.faces().iter().enumerate() {
                self.encode_face(face, batch.face_mut(b, f))?;
            }
        }
        Ok(batch)
    }

    pub fn decode<T: Real>(&self, lat: &FaceLatentBatch<T>, b: usize, fov_deg: f64) -> Result<CubemapImage> {
        let (_, _, c, n, _) = lat.dims();
        if c != self.latent_channels() {
            return Err(Error::Config(format!("latent has {c} channels, codec expects {}", self.latent_channels())));
        }
        let faces = (0..6).map(|f| self.decode_face(lat.face(b, f), n)).collect();
        CubemapImage::new(faces, fov_deg)
    }

    /// One face as a `[c, n, n]` tensor.
    pub fn encode_image<T: Real>(&self, img: &Image) -> Result<Tensor<T>> {
        let n = self.latent_size(img.width)?;
        let mut t = Tensor::zeros(&[self.latent_channels(), n, n]);
        self.encode_face(img, t.data_mut())?;
        Ok(t)
    }
}
