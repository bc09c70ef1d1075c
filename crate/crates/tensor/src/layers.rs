//! Parameterized building blocks on top of [`Graph`].

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::mask::{AttentionMask, AttentionScope};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `g`, differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Standard normal samples for initialization.
pub type NormalSource<'a> = &'a mut dyn FnMut() -> f64;

fn init_tensor<T: Real>(shape: &[usize], std: f64, normal: NormalSource) -> Tensor<T> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    Tensor::from_fn(shape, |_| T::of(normal() * std))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Fan-in scaled normal weights; zero weights when `zero_init`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        zero_init: bool,
        normal: NormalSource,
    ) -> Result<Self> {
        let std = if zero_init { 0.0 } else { 1.0 / (inp as f64).sqrt() };
        let w = store.add(format!("{name}.weight"), init_tensor(&[inp, out], std, normal))?;
        let b = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out]))?) } else { None };
        Ok(Linear { w, b, inp, out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        zero_init: bool,
        normal: NormalSource,
    ) -> Result<Self> {
        let std = if zero_init { 0.0 } else { 1.0 / ((cin * kernel * kernel) as f64).sqrt() };
        let w = store.add(format!("{name}.weight"), init_tensor(&[cout, cin, kernel, kernel], std, normal))?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Conv2d { w, b, stride, cin, cout })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
    pub synchronized: bool,
}

impl GroupNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
        eps: f64,
        synchronized: bool,
    ) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(TensorError::Config(format!(
                "{name}: {channels} channels not divisible into {groups} groups"
            )));
        }
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(GroupNorm { gamma, beta, groups, eps, synchronized })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, faces: usize) -> Result<Var> {
        g.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups, faces, self.synchronized, self.eps)
    }
}

/// Multi-head self-attention over the concatenated tokens of all faces.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        normal: NormalSource,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Config(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, false, normal)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, false, normal)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, false, normal)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, false, normal)?,
            heads,
        })
    }

    /// `x` is `[b, faces * h * w, dim]`. With [`AttentionScope::Inflated`]
    /// every token sees every face; with [`AttentionScope::PerFace`] the
    /// scores are block-diagonal over faces. `mask` hides keys per batch row.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        faces: usize,
        scope: AttentionScope,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let seq = g.shape(x)[1];
        if faces == 0 || seq % faces != 0 {
            return Err(TensorError::Config(format!("sequence {seq} not split into {faces} faces")));
        }
        let blocks = match scope {
            AttentionScope::Inflated => None,
            AttentionScope::PerFace => Some((seq / faces, seq / faces)),
        };
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let a = g.attention(q, k, v, self.heads, mask, blocks)?;
        self.o.forward(g, p, a)
    }
}

/// Text conditioning: queries from image tokens, keys/values from text.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub text_dim: usize,
}

/// Layout of the text tokens handed to [`CrossAttention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextLayout {
    /// One token set shared by all faces: `[b, tokens, text_dim]`.
    Shared,
    /// One token set per face, concatenated: `[b, faces * tokens, text_dim]`.
    PerFace,
}

impl CrossAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        text_dim: usize,
        heads: usize,
        normal: NormalSource,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Config(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(CrossAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, false, normal)?,
            k: Linear::new(store, &format!("{name}.k"), text_dim, dim, false, false, normal)?,
            v: Linear::new(store, &format!("{name}.v"), text_dim, dim, true, false, normal)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, false, false, normal)?,
            heads,
            text_dim,
        })
    }

    /// Inflated cross-attention: with per-face prompts and
    /// [`AttentionScope::Inflated`], every face attends to the prompts of all
    /// faces; with [`AttentionScope::PerFace`] a face only reads its own.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        text: Var,
        layout: TextLayout,
        faces: usize,
        scope: AttentionScope,
    ) -> Result<Var> {
        let (xs, ts) = (g.shape(x).to_vec(), g.shape(text).to_vec());
        if ts.len() != 3 || ts[0] != xs[0] || ts[2] != self.text_dim || ts[1] == 0 {
            return Err(TensorError::Config(format!(
                "text tokens {ts:?} do not match image tokens {xs:?} (text dim {})",
                self.text_dim
            )));
        }
        let blocks = match (layout, scope) {
            (TextLayout::PerFace, AttentionScope::PerFace) => {
                if ts[1] % faces != 0 {
                    return Err(TensorError::Config("per-face text not divisible by faces".into()));
                }
                Some((xs[1] / faces, ts[1] / faces))
            }
            _ => None,
        };
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, text)?;
        let v = self.v.forward(g, p, text)?;
        let a = g.attention(q, k, v, self.heads, None, blocks)?;
        self.o.forward(g, p, a)
    }
}
