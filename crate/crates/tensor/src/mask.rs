use crate::error::{Result, TensorError};
use crate::kernels::attention::MaskSpec;

/// Additive key mask: per batch row, each key position carries `0` or `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    batch: usize,
    keys: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    /// A mask that hides nothing.
    pub fn open(batch: usize, keys: usize) -> Self {
        AttentionMask { batch, keys, blocked: vec![false; batch * keys] }
    }

    /// Builds a mask from explicit per-row blocked flags (`[batch * keys]`).
    /// Fails if some row would have no visible key.
    pub fn from_blocked(batch: usize, keys: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != batch * keys {
            return Err(TensorError::Config(format!(
                "mask has {} entries, expected {batch} x {keys}",
                blocked.len()
            )));
        }
        for b in 0..batch {
            if blocked[b * keys..(b + 1) * keys].iter().all(|&x| x) {
                return Err(TensorError::Config(format!(
                    "mask hides every key of batch row {b}"
                )));
            }
        }
        Ok(AttentionMask { batch, keys, blocked })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn is_blocked(&self, b: usize, key: usize) -> bool {
        self.blocked[b * self.keys + key]
    }

    pub fn is_open(&self) -> bool {
        !self.blocked.iter().any(|&x| x)
    }

    /// Additive values: `0.0` for visible keys, `-inf` for hidden ones.
    pub fn additive(&self) -> Vec<f64> {
        self.blocked.iter().map(|&m| if m { f64::NEG_INFINITY } else { 0.0 }).collect()
    }

    pub(crate) fn blocked(&self) -> &[bool] {
        &self.blocked
    }
}

/// Key mask that hides the conditioning tokens when the image condition is
/// dropped. `cond_tokens[b]` lists the token positions of batch row `b`'s
/// conditioning face; rows with `drop_image[b] == false` stay open.
pub fn condition_attention_mask(
    seq_len: usize,
    cond_tokens: &[Vec<usize>],
    drop_image: &[bool],
) -> Result<AttentionMask> {
    if cond_tokens.len() != drop_image.len() {
        return Err(TensorError::Config("one drop flag per batch row".into()));
    }
    let batch = drop_image.len();
    let mut blocked = vec![false; batch * seq_len];
    for (b, (idx, &drop)) in cond_tokens.iter().zip(drop_image).enumerate() {
        if !drop {
            continue;
        }
        for &i in idx {
            if i >= seq_len {
                return Err(TensorError::Config(format!(
                    "conditioning token {i} outside sequence of {seq_len}"
                )));
            }
            blocked[b * seq_len + i] = true;
        }
    }
    AttentionMask::from_blocked(batch, seq_len, blocked)
}

/// How far attention reaches across the cube faces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionScope {
    /// One sequence of `t * h * w` tokens per batch row.
    #[default]
    Inflated,
    /// Block-diagonal: every face only sees its own tokens.
    PerFace,
}

pub(crate) fn mask_spec<'a>(
    mask: Option<&'a AttentionMask>,
    blocks: Option<(usize, usize)>,
) -> MaskSpec<'a> {
    MaskSpec {
        blocked_keys: mask.filter(|m| !m.is_open()).map(|m| m.blocked()),
        blocks,
    }
}
