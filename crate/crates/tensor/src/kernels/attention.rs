//! Multi-head scaled dot-product attention over `[b, n, d]` token tensors.

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, MatView, Real};

#[derive(Debug, Clone, Copy)]
pub struct AttentionGeom {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionGeom {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn q_view(&self, b: usize, h: usize) -> MatView {
        MatView::strided(b * self.queries * self.dim + h * self.head_dim(), self.queries, self.head_dim(), self.dim)
    }

    fn k_view(&self, b: usize, h: usize) -> MatView {
        MatView::strided(b * self.keys * self.dim + h * self.head_dim(), self.keys, self.head_dim(), self.dim)
    }

    fn p_offset(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.queries * self.keys
    }
}

/// Which (query, key) pairs are visible.
///
/// A pair is hidden when its key is blocked for that batch row, or when
/// block-diagonal structure is requested and the query and key fall in
/// different blocks. Hidden pairs get an additive `-inf` before the softmax,
/// so their weights are exactly zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskSpec<'a> {
    /// `[batch * keys]`, `true` = masked.
    pub blocked_keys: Option<&'a [bool]>,
    /// `(query_block, key_block)` sizes of a block-diagonal layout.
    pub blocks: Option<(usize, usize)>,
}

impl MaskSpec<'_> {
    #[inline]
    fn hidden(&self, b: usize, keys: usize, q: usize, k: usize) -> bool {
        if let Some(bk) = self.blocked_keys {
            if bk[b * keys + k] {
                return true;
            }
        }
        match self.blocks {
            Some((qb, kb)) => q / qb != k / kb,
            None => false,
        }
    }
}

/// Returns `(output [b, nq, d], probabilities [b, heads, nq, nk])`.
pub fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &AttentionGeom,
    mask: &MaskSpec,
) -> Result<(Vec<T>, Vec<T>)> {
    let hd = g.head_dim();
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut probs = vec![T::zero(); g.batch * g.heads * g.queries * g.keys];
    let mut out = vec![T::zero(); g.batch * g.queries * g.dim];
    let masked = mask.blocked_keys.is_some() || mask.blocks.is_some();
    for b in 0..g.batch {
        for h in 0..g.heads {
            let po = g.p_offset(b, h);
            gemm(
                scale,
                q,
                g.q_view(b, h),
                k,
                g.k_view(b, h).t(),
                T::zero(),
                &mut probs,
                MatView::row_major(po, g.queries, g.keys),
            );
            for qi in 0..g.queries {
                let row = &mut probs[po + qi * g.keys..][..g.keys];
                if masked {
                    for (ki, s) in row.iter_mut().enumerate() {
                        if mask.hidden(b, g.keys, qi, ki) {
                            *s = T::neg_infinity();
                        }
                    }
                }
                softmax_in_place(row).ok_or(TensorError::FullyMasked { batch: b, row: qi })?;
            }
            gemm(
                T::one(),
                &probs,
                MatView::row_major(po, g.queries, g.keys),
                v,
                g.k_view(b, h),
                T::zero(),
                &mut out,
                g.q_view(b, h),
            );
        }
    }
    Ok((out, probs))
}

/// Numerically stable softmax; `None` when every entry is `-inf`.
fn softmax_in_place<T: Real>(row: &mut [T]) -> Option<()> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return None;
    }
    let mut sum = T::zero();
    for s in row.iter_mut() {
        *s = if *s == T::neg_infinity() { T::zero() } else { (*s - max).exp() };
        sum = sum + *s;
    }
    for s in row.iter_mut() {
        *s = *s / sum;
    }
    Some(())
}

/// Gradients `(dq, dk, dv)` from the upstream gradient of the output.
pub fn attention_backward<T: Real>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &AttentionGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hd = g.head_dim();
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); g.queries * g.keys];
    let sv = MatView::row_major(0, g.queries, g.keys);
    for b in 0..g.batch {
        for h in 0..g.heads {
            let pv = MatView::row_major(g.p_offset(b, h), g.queries, g.keys);
            gemm(T::one(), probs, pv.t(), dout, g.q_view(b, h), T::zero(), &mut dv, g.k_view(b, h));
            gemm(T::one(), dout, g.q_view(b, h), v, g.k_view(b, h).t(), T::zero(), &mut ds, sv);
            let p = &probs[pv.offset..][..g.queries * g.keys];
            for qi in 0..g.queries {
                let prow = &p[qi * g.keys..][..g.keys];
                let drow = &mut ds[qi * g.keys..][..g.keys];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pp) in drow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot);
                }
            }
            gemm(scale, &ds, sv, k, g.k_view(b, h), T::zero(), &mut dq, g.q_view(b, h));
            gemm(scale, &ds, sv.t(), q, g.q_view(b, h), T::zero(), &mut dk, g.k_view(b, h));
        }
    }
    (dq, dk, dv)
}
