//! Float images: row-major, interleaved channels, nominal range `[0, 1]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Horizontal boundary handling for [`Image::sample`]. Rows always clamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrap {
    Clamp,
    /// Columns wrap around (longitude continuity).
    WrapX,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Domain(format!("empty image {width}x{height}x{channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Domain(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value {i}")));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, color: &[f64]) -> Self {
        let data = color.iter().copied().cycle().take(width * height * color.len()).collect();
        Image { width, height, channels: color.len(), data }
    }

    /// Builds an image from a per-pixel function writing `channels` values.
    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, &mut [f64])) -> Self {
        let mut data = vec![0.0; width * height * channels];
        for (p, px) in data.chunks_mut(channels).enumerate() {
            f(p / width, p % width, px);
        }
        Image { width, height, channels, data }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = (row * self.width + col) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Bilinear sample at continuous coordinates where pixel `(i, j)` covers
    /// `[j, j+1) x [i, i+1)`, so its center is `(j + 0.5, i + 0.5)`.
    pub fn sample(&self, x: f64, y: f64, wrap: Wrap, out: &mut [f64]) {
        let (w, h) = (self.width as isize, self.height as isize);
        let (fx, fy) = (x - 0.5, y - 0.5);
        let (x0f, y0f) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - x0f, fy - y0f);
        let (x0, y0) = (x0f as isize, y0f as isize);
        let col = |c: isize| -> usize {
            match wrap {
                Wrap::Clamp => c.clamp(0, w - 1) as usize,
                Wrap::WrapX => c.rem_euclid(w) as usize,
            }
        };
        let row = |r: isize| -> usize { r.clamp(0, h - 1) as usize };
        let (c0, c1, r0, r1) = (col(x0), col(x0 + 1), row(y0), row(y0 + 1));
        let (p00, p01, p10, p11) = (self.pixel(r0, c0), self.pixel(r0, c1), self.pixel(r1, c0), self.pixel(r1, c1));
        for (k, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = p00[k] + tx * (p01[k] - p00[k]);
            let bottom = p10[k] + tx * (p11[k] - p10[k]);
            *o = top + ty * (bottom - top);
        }
    }

    /// Per-channel mean.
    pub fn mean_color(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.channels];
        for px in self.data.chunks(self.channels) {
            for (a, b) in m.iter_mut().zip(px) {
                *a += b;
            }
        }
        let n = (self.width * self.height) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Mean color of the axis-aligned block `rows x cols`.
    pub fn region_mean(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
        let mut m = vec![0.0; self.channels];
        let mut n = 0.0;
        for r in rows {
            for c in cols.clone() {
                for (a, b) in m.iter_mut().zip(self.pixel(r, c)) {
                    *a += b;
                }
                n += 1.0;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// Elementwise combination of two images of the same shape.
    pub fn map_with(&self, o: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        assert!(self.same_shape(o), "map_with on differently shaped images");
        Image { data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(), ..self.clone() }
    }

    pub fn same_shape(&self, o: &Image) -> bool {
        self.width == o.width && self.height == o.height && self.channels == o.channels
    }

    pub fn rms_diff(&self, o: &Image) -> f64 {
        assert!(self.same_shape(o), "rms_diff on different shapes");
        let s: f64 = self.data.iter().zip(&o.data).map(|(a, b)| (a - b).powi(2)).sum();
        (s / self.data.len() as f64).sqrt()
    }

    pub fn max_abs_diff(&self, o: &Image) -> f64 {
        assert!(self.same_shape(o), "max_abs_diff on different shapes");
        self.data.iter().zip(&o.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Peak signal-to-noise ratio in dB for peak value 1.
    pub fn psnr(&self, o: &Image) -> f64 {
        let mse = self.rms_diff(o).powi(2);
        -10.0 * mse.log10()
    }
}
