//! Group normalization, optionally synchronized across the cube faces.

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupNormGeom {
    /// Images, i.e. `b * faces`.
    pub n: usize,
    pub channels: usize,
    /// Spatial size `h * w`.
    pub plane: usize,
    /// Consecutive images that form one sample (the cube faces).
    pub faces: usize,
    pub groups: usize,
    /// Pool statistics over all faces of a sample instead of per image.
    pub synchronized: bool,
}

impl GroupNormGeom {
    pub fn group_channels(&self) -> usize {
        self.channels / self.groups
    }

    pub fn stat_count(&self) -> usize {
        if self.synchronized {
            (self.n / self.faces) * self.groups
        } else {
            self.n * self.groups
        }
    }

    fn members(&self) -> usize {
        let per_image = self.group_channels() * self.plane;
        if self.synchronized {
            per_image * self.faces
        } else {
            per_image
        }
    }

    /// Calls `f(offset, len)` for each contiguous run belonging to stat `s`,
    /// in canonical order (image, then channel).
    fn for_runs(&self, s: usize, mut f: impl FnMut(usize, usize)) {
        let gc = self.group_channels();
        let run = gc * self.plane;
        let (first, count, g) = if self.synchronized {
            let (sample, g) = (s / self.groups, s % self.groups);
            (sample * self.faces, self.faces, g)
        } else {
            (s / self.groups, 1, s % self.groups)
        };
        for img in first..first + count {
            f((img * self.channels + g * gc) * self.plane, run);
        }
    }

    fn stat_of_channel_offset(&self, img: usize, c: usize) -> usize {
        let g = c / self.group_channels();
        if self.synchronized {
            (img / self.faces) * self.groups + g
        } else {
            img * self.groups + g
        }
    }
}

pub struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Returns `gamma[c] * (x - mean) / sqrt(var + eps) + beta[c]` and the
/// normalized activations for the backward pass. Statistics accumulate in
/// `f64` in canonical index order.
pub fn group_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
    g: &GroupNormGeom,
) -> (Vec<T>, GroupNormCache<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); g.stat_count()];
    let m = g.members() as f64;
    for (s, inv) in inv_std.iter_mut().enumerate() {
        let mut sum = 0.0;
        g.for_runs(s, |o, len| sum += x[o..o + len].iter().map(|v| v.f64()).sum::<f64>());
        let mut mean = sum / m;
        // second pass removes the rounding left in the first mean
        let mut resid = 0.0;
        g.for_runs(s, |o, len| resid += x[o..o + len].iter().map(|v| v.f64() - mean).sum::<f64>());
        mean += resid / m;
        let mut sq = 0.0;
        g.for_runs(s, |o, len| {
            sq += x[o..o + len].iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>()
        });
        let istd = 1.0 / (sq / m + eps).sqrt();
        *inv = T::of(istd);
        g.for_runs(s, |o, len| {
            for i in o..o + len {
                xhat[i] = T::of((x[i].f64() - mean) * istd);
            }
        });
    }
    let mut y = vec![T::zero(); x.len()];
    for img in 0..g.n {
        for c in 0..g.channels {
            let o = (img * g.channels + c) * g.plane;
            for i in o..o + g.plane {
                y[i] = xhat[i] * gamma[c] + beta[c];
            }
        }
    }
    (y, GroupNormCache { xhat, inv_std })
}

pub struct GroupNormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn group_norm_backward<T: Real>(
    dy: &[T],
    gamma: &[T],
    cache: &GroupNormCache<T>,
    g: &GroupNormGeom,
) -> GroupNormGrads<T> {
    let xhat = &cache.xhat;
    let mut dgamma = vec![T::zero(); g.channels];
    let mut dbeta = vec![T::zero(); g.channels];
    let mut dxhat = vec![T::zero(); dy.len()];
    for img in 0..g.n {
        for c in 0..g.channels {
            let o = (img * g.channels + c) * g.plane;
            let (mut sg, mut sb) = (T::zero(), T::zero());
            for i in o..o + g.plane {
                sg = sg + dy[i] * xhat[i];
                sb = sb + dy[i];
                dxhat[i] = dy[i] * gamma[c];
            }
            dgamma[c] = dgamma[c] + sg;
            dbeta[c] = dbeta[c] + sb;
        }
    }
    // Per-stat sums of dxhat and dxhat * xhat.
    let stats = g.stat_count();
    let mut s1 = vec![0.0f64; stats];
    let mut s2 = vec![0.0f64; stats];
    for (s, (a, b)) in s1.iter_mut().zip(s2.iter_mut()).enumerate() {
        g.for_runs(s, |o, len| {
            for i in o..o + len {
                *a += dxhat[i].f64();
                *b += (dxhat[i] * xhat[i]).f64();
            }
        });
    }
    let m = g.members() as f64;
    let mut dx = vec![T::zero(); dy.len()];
    for img in 0..g.n {
        for c in 0..g.channels {
            let s = g.stat_of_channel_offset(img, c);
            let (a, b, istd) = (s1[s] / m, s2[s] / m, cache.inv_std[s].f64());
            let o = (img * g.channels + c) * g.plane;
            for i in o..o + g.plane {
                dx[i] = T::of(istd * (dxhat[i].f64() - a - xhat[i].f64() * b));
            }
        }
    }
    GroupNormGrads { dx, dgamma, dbeta }
}
