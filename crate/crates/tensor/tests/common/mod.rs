#![allow(dead_code)]

use cubepano_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

pub fn normal_source(rng: &mut ChaCha8Rng) -> impl FnMut() -> f64 + '_ {
    move || StandardNormal.sample(rng)
}

/// Naive convolution: `x [n, cin, h, w]`, `w [cout, cin, k, k]`, pad k/2.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, k) = (w.dim(0), w.dim(2));
    let pad = (k / 2) as isize;
    let oh = (h + 2 * (k / 2) - k) / stride + 1;
    let ow = (wd + 2 * (k / 2) - k) / stride + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for i in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad;
                                let ix = (ox * stride + kx) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += wdat[((co * cin + ci) * k + ky) * k + kx]
                                    * xd[((i * cin + ci) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((i * cout + co) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

/// Single-head-loop reference attention with an explicit visibility predicate.
pub fn attention_oracle(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    heads: usize,
    visible: impl Fn(usize, usize, usize) -> bool,
) -> Tensor<f64> {
    let (b, nq, d) = (q.dim(0), q.dim(1), q.dim(2));
    let nk = k.dim(1);
    let hd = d / heads;
    let mut out = vec![0.0; b * nq * d];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..nq {
                let mut scores = vec![f64::NEG_INFINITY; nk];
                for (j, s) in scores.iter_mut().enumerate() {
                    if !visible(bi, i, j) {
                        continue;
                    }
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += q.data()[(bi * nq + i) * d + h * hd + c] * k.data()[(bi * nk + j) * d + h * hd + c];
                    }
                    *s = dot / (hd as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|&s| if s.is_finite() { (s - m).exp() } else { 0.0 }).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..nk {
                        acc += e[j] / z * v.data()[(bi * nk + j) * d + h * hd + c];
                    }
                    out[(bi * nq + i) * d + h * hd + c] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, nq, d], out).unwrap()
}
