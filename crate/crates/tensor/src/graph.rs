//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Image tensors are `[n, c, h, w]` where `n = b * faces`;
//! token tensors are `[b, seq, dim]`.

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::attention::{attention_backward, attention_forward, AttentionGeom};
use crate::kernels::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::kernels::norm::{group_norm_backward, group_norm_forward, GroupNormCache, GroupNormGeom};
use crate::mask::{mask_spec, AttentionMask};
use crate::scalar::{gemm, MatView, Real};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Option<Vec<T>> },
    GroupNorm { x: Var, gamma: Var, beta: Var, geom: GroupNormGeom, cache: GroupNormCache<T> },
    SampleBias { x: Var, e: Var, faces: usize, channels: usize, plane: usize },
    Concat { a: Var, b: Var, ca: usize, cb: usize, plane: usize },
    Upsample { x: Var, h: usize, w: usize },
    AvgPool { x: Var, h: usize, w: usize },
    ToTokens { x: Var, channels: usize, plane: usize },
    FromTokens { x: Var, channels: usize, plane: usize },
    Attention { q: Var, k: Var, v: Var, geom: AttentionGeom, probs: Vec<T> },
    Mse { pred: Var, target: Vec<T>, weights: Vec<T>, wsum: T },
    WeightedSum { x: Var, r: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    scope: Vec<String>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), scope: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names used in non-finite errors, e.g. `down1/res0`.
    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.all_finite() {
            let mut path = self.scope.join("/");
            if !path.is_empty() {
                path.push('/');
            }
            path.push_str(name);
            return Err(TensorError::NonFinite { op: path });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true, "param")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng, "scale")
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let ng = self.needs(a);
        self.push(v, Op::Silu(a), ng, "silu")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a), ng, "reshape")
    }

    /// `x @ w + b` over the last axis. `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(shape_err("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let (inp, out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(shape_err("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / inp;
        let mut y = vec![T::zero(); rows * out];
        gemm(
            T::one(),
            self.value(x).data(),
            MatView::row_major(0, rows, inp),
            self.value(w).data(),
            MatView::row_major(0, inp, out),
            T::zero(),
            &mut y,
            MatView::row_major(0, rows, out),
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in y.chunks_mut(out) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v = *v + bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(&shape, y)?, Op::Linear { x, w, b, rows, inp, out }, ng, "linear")
    }

    /// Square-kernel convolution with `pad = k / 2`. `w` is `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err("conv2d", format!("x {xs:?}, w {ws:?}, stride {stride}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kernel: ws[2],
            stride,
        };
        let (y, cols) = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let shape = [geom.n, geom.cout, geom.out_h(), geom.out_w()];
        let cols = if ng { cols } else { None };
        self.push(Tensor::new(&shape, y)?, Op::Conv { x, w, b, geom, cols }, ng, "conv2d")
    }

    /// Group norm over `[n, c, ...]` with per-channel affine `gamma`, `beta`.
    /// With `synchronized`, statistics pool over each run of `faces`
    /// consecutive images as well.
    #[allow(clippy::too_many_arguments)]
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        faces: usize,
        synchronized: bool,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("group_norm", format!("{xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if faces == 0 || n % faces != 0 {
            return Err(TensorError::Config(format!("group_norm: {n} images, {faces} faces")));
        }
        if !(eps > 0.0) {
            return Err(TensorError::Config("group_norm: eps must be positive".into()));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm", "affine parameters must be [c]"));
        }
        let geom = GroupNormGeom {
            n,
            channels: c,
            plane: xs[2..].iter().product(),
            faces,
            groups,
            synchronized,
        };
        let (y, cache) = group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            &geom,
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Tensor::new(&xs, y)?, Op::GroupNorm { x, gamma, beta, geom, cache }, ng, "group_norm")
    }

    /// `x[n, c, ..] += e[n / faces, c]`.
    pub fn add_sample_bias(&mut self, x: Var, e: Var, faces: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e).to_vec();
        if xs.len() < 2 || es.len() != 2 || es[1] != xs[1] || es[0] * faces != xs[0] {
            return Err(shape_err("add_sample_bias", format!("x {xs:?}, e {es:?}, faces {faces}")));
        }
        let channels = xs[1];
        let plane: usize = xs[2..].iter().product();
        let mut y = self.value(x).clone();
        let ed = self.value(e).data().to_vec();
        for (img, chunk) in y.data_mut().chunks_mut(channels * plane).enumerate() {
            let s = img / faces;
            for (c, pl) in chunk.chunks_mut(plane).enumerate() {
                let bv = ed[s * channels + c];
                for v in pl {
                    *v = *v + bv;
                }
            }
        }
        let ng = self.needs(x) || self.needs(e);
        self.push(y, Op::SampleBias { x, e, faces, channels, plane }, ng, "add_sample_bias")
    }

    /// Channel concatenation of two `[n, c, ..]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let (ca, cb) = (sa[1], sb[1]);
        let plane: usize = sa[2..].iter().product();
        let mut y = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for n in 0..sa[0] {
            y.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            y.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, y)?, Op::Concat { a, b, ca, cb, plane }, ng, "concat")
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample_2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("upsample_2x", format!("{s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut y = vec![T::zero(); src.len() * 4];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut y[p * 4 * h * w..][..4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = plane[(i / 2) * w + j / 2];
                }
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(&[s[0], s[1], 2 * h, 2 * w], y)?, Op::Upsample { x, h, w }, ng, "upsample")
    }

    /// 2x2 average pooling of `[n, c, h, w]` (even `h`, `w`).
    pub fn downsample_2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(shape_err("downsample_2x", format!("{s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let src = self.value(x).data();
        let mut y = vec![T::zero(); src.len() / 4];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut y[p * oh * ow..][..oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let a = plane[2 * i * w + 2 * j] + plane[2 * i * w + 2 * j + 1];
                    let b = plane[(2 * i + 1) * w + 2 * j] + plane[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = (a + b) * quarter;
                }
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(&[s[0], s[1], oh, ow], y)?, Op::AvgPool { x, h, w }, ng, "downsample")
    }

    /// `[b * faces, c, h, w]` images to `[b, faces * h * w, c]` tokens
    /// (face-major, then row-major pixels).
    pub fn images_to_tokens(&mut self, x: Var, faces: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || faces == 0 || s[0] % faces != 0 {
            return Err(shape_err("images_to_tokens", format!("{s:?}, faces {faces}")));
        }
        let (channels, plane) = (s[1], s[2] * s[3]);
        let b = s[0] / faces;
        let y = to_tokens(self.value(x).data(), channels, plane);
        let ng = self.needs(x);
        self.push(
            Tensor::new(&[b, faces * plane, channels], y)?,
            Op::ToTokens { x, channels, plane },
            ng,
            "to_tokens",
        )
    }

    /// Inverse of [`Graph::images_to_tokens`].
    pub fn tokens_to_images(&mut self, x: Var, faces: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let plane = h * w;
        if s.len() != 3 || s[1] != faces * plane {
            return Err(shape_err("tokens_to_images", format!("{s:?}, {faces}x{h}x{w}")));
        }
        let channels = s[2];
        let y = from_tokens(self.value(x).data(), channels, plane);
        let ng = self.needs(x);
        self.push(
            Tensor::new(&[s[0] * faces, channels, h, w], y)?,
            Op::FromTokens { x, channels, plane },
            ng,
            "from_tokens",
        )
    }

    /// Multi-head scaled dot-product attention. `q` is `[b, nq, d]`, `k` and
    /// `v` are `[b, nk, d]`. `blocks = Some((qb, kb))` restricts query block
    /// `i` to key block `i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttentionMask>,
        blocks: Option<(usize, usize)>,
    ) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(shape_err("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        if heads == 0 || qs[2] % heads != 0 {
            return Err(TensorError::Config(format!(
                "attention: dim {} not divisible by {heads} heads",
                qs[2]
            )));
        }
        let geom = AttentionGeom { batch: qs[0], queries: qs[1], keys: ks[1], dim: qs[2], heads };
        if let Some(m) = mask {
            if m.batch() != geom.batch || m.keys() != geom.keys {
                return Err(shape_err(
                    "attention",
                    format!("mask {}x{} for {}x{}", m.batch(), m.keys(), geom.batch, geom.keys),
                ));
            }
        }
        if let Some((qb, kb)) = blocks {
            if qb == 0 || kb == 0 || geom.queries % qb != 0 || geom.keys % kb != 0 || geom.queries / qb != geom.keys / kb {
                return Err(shape_err("attention", format!("blocks ({qb}, {kb})")));
            }
        }
        let spec = mask_spec(mask, blocks);
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &geom,
            &spec,
        )?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let probs = if ng { probs } else { Vec::new() };
        self.push(Tensor::new(&qs, out)?, Op::Attention { q, k, v, geom, probs }, ng, "attention")
    }

    /// Weighted mean squared error `sum w (p - t)^2 / sum w` against a constant
    /// target. `weights` broadcast from the front: their length must divide
    /// the prediction length and each weight covers a contiguous run.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>, weights: &[T]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || weights.is_empty() || p.numel() % weights.len() != 0 {
            return Err(shape_err("mse", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        let run = p.numel() / weights.len();
        let full: Vec<T> = weights.iter().flat_map(|&w| std::iter::repeat_n(w, run)).collect();
        let wsum: T = full.iter().copied().sum();
        if wsum <= T::zero() {
            return Err(TensorError::Config("mse: weights sum to zero".into()));
        }
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .zip(&full)
            .map(|((&a, &b), &w)| w * (a - b) * (a - b))
            .sum::<T>()
            / wsum;
        let ng = self.needs(pred);
        let target = target.data().to_vec();
        self.push(Tensor::scalar(loss), Op::Mse { pred, target, weights: full, wsum }, ng, "mse")
    }

    /// `sum x * r` for a constant `r`; turns any output into a scalar probe.
    pub fn weighted_sum(&mut self, x: Var, r: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != r.shape() {
            return Err(shape_err("weighted_sum", format!("{:?} vs {:?}", self.shape(x), r.shape())));
        }
        let s = self.value(x).data().iter().zip(r.data()).map(|(&a, &b)| a * b).sum::<T>();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, r: r.data().to_vec() }, ng, "weighted_sum")
    }

    /// Reverse pass from a scalar (or seeded with ones for non-scalars).
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(&node.op, &node.value, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot => {
                let shape = self.nodes[v.0].value.shape();
                *slot = Some(Tensor::new(shape, g).expect("gradient shape"));
            }
        }
    }

    fn backprop(
        &self,
        op: &Op<T>,
        value: &Tensor<T>,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let dy = gy.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.to_vec());
                self.acc(grads, *b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.to_vec());
                self.acc(grads, *b, dy.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.acc(grads, *a, dy.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, dy.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, dy.iter().map(|&v| v * *s).collect()),
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let g = dy
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.acc(grads, *a, g);
            }
            Op::Reshape(a) => self.acc(grads, *a, dy.to_vec()),
            Op::Linear { x, w, b, rows, inp, out } => {
                let (rows, inp, out) = (*rows, *inp, *out);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * inp];
                    gemm(
                        T::one(),
                        dy,
                        MatView::row_major(0, rows, out),
                        self.value(*w).data(),
                        MatView::row_major(0, inp, out).t(),
                        T::zero(),
                        &mut dx,
                        MatView::row_major(0, rows, inp),
                    );
                    self.acc(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); inp * out];
                    gemm(
                        T::one(),
                        self.value(*x).data(),
                        MatView::row_major(0, rows, inp).t(),
                        dy,
                        MatView::row_major(0, rows, out),
                        T::zero(),
                        &mut dw,
                        MatView::row_major(0, inp, out),
                    );
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); out];
                        for row in dy.chunks(out) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d = *d + g;
                            }
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::Conv { x, w, b, geom, cols } => {
                let want_db = b.is_some_and(|b| self.needs(b));
                let g = conv2d_backward(
                    dy,
                    self.value(*x).data(),
                    cols.as_deref(),
                    self.value(*w).data(),
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                    want_db,
                );
                if let Some(dx) = g.dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = g.dweight {
                    self.acc(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, g.dbias) {
                    self.acc(grads, *b, db);
                }
            }
            Op::GroupNorm { x, gamma, beta, geom, cache } => {
                let g = group_norm_backward(dy, self.value(*gamma).data(), cache, geom);
                self.acc(grads, *x, g.dx);
                self.acc(grads, *gamma, g.dgamma);
                self.acc(grads, *beta, g.dbeta);
            }
            Op::SampleBias { x, e, faces, channels, plane } => {
                self.acc(grads, *x, dy.to_vec());
                if self.needs(*e) {
                    let mut de = vec![T::zero(); self.value(*e).numel()];
                    for (img, chunk) in dy.chunks(channels * plane).enumerate() {
                        let s = img / faces;
                        for (c, pl) in chunk.chunks(*plane).enumerate() {
                            de[s * channels + c] = de[s * channels + c] + pl.iter().copied().sum::<T>();
                        }
                    }
                    self.acc(grads, *e, de);
                }
            }
            Op::Concat { a, b, ca, cb, plane } => {
                let n = value.dim(0);
                let (la, lb) = (ca * plane, cb * plane);
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for chunk in dy.chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Upsample { x, h, w } => {
                let (h, w) = (*h, *w);
                let mut dx = vec![T::zero(); dy.len() / 4];
                for (p, plane) in dy.chunks(4 * h * w).enumerate() {
                    let dst = &mut dx[p * h * w..][..h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            let d = &mut dst[(i / 2) * w + j / 2];
                            *d = *d + plane[i * 2 * w + j];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::AvgPool { x, h, w } => {
                let (h, w) = (*h, *w);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); dy.len() * 4];
                for (p, plane) in dy.chunks(oh * ow).enumerate() {
                    let dst = &mut dx[p * h * w..][..h * w];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = plane[(i / 2) * ow + j / 2] * quarter;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::ToTokens { x, channels, plane } => {
                self.acc(grads, *x, from_tokens(dy, *channels, *plane));
            }
            Op::FromTokens { x, channels, plane } => {
                self.acc(grads, *x, to_tokens(dy, *channels, *plane));
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (dq, dk, dv) = attention_backward(
                    dy,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    geom,
                );
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::Mse { pred, target, weights, wsum } => {
                let g0 = dy[0] * T::of(2.0) / *wsum;
                let p = self.value(*pred).data();
                let d = p
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((&a, &b), &w)| g0 * w * (a - b))
                    .collect();
                self.acc(grads, *pred, d);
            }
            Op::WeightedSum { x, r } => {
                self.acc(grads, *x, r.iter().map(|&v| v * dy[0]).collect());
            }
        }
        Ok(())
    }
}

/// `[n, c, p]` -> `[n, p, c]` (per image transpose; `n = b * faces`, so the
/// flat result is exactly `[b, faces * p, c]`).
fn to_tokens<T: Real>(x: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (img, src) in x.chunks(channels * plane).enumerate() {
        let dst = &mut y[img * channels * plane..][..channels * plane];
        for c in 0..channels {
            for p in 0..plane {
                dst[p * channels + c] = src[c * plane + p];
            }
        }
    }
    y
}

fn from_tokens<T: Real>(x: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (img, src) in x.chunks(channels * plane).enumerate() {
        let dst = &mut y[img * channels * plane..][..channels * plane];
        for p in 0..plane {
            for c in 0..channels {
                dst[c * plane + p] = src[p * channels + c];
            }
        }
    }
    y
}
