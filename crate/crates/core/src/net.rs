//! The multi-view denoiser.
//!
//! Every face runs through the same U-Net with three downsamplings. Group
//! norms pool their statistics over all six faces, and attention blocks see
//! the tokens of all faces at once. The outermost resolution level has no
//! attention.

use cubepano_tensor::{
    condition_attention_mask, AttentionMask, AttentionScope, Bound, Conv2d, CrossAttention, FaceLatentBatch,
    Graph, GroupNorm, Linear, ParamStore, Real, SelfAttention, Tensor, TextLayout, Var, CUBE_FACES,
};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{positional_encoding, FaceId};
use crate::rng::stream;

/// Number of resolution levels; three downsamplings separate them.
pub const LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Attention over the tokens of all faces.
    #[default]
    Inflated,
    /// Block-diagonal control: each face attends to itself only.
    PerFace,
}

impl From<AttentionMode> for AttentionScope {
    fn from(m: AttentionMode) -> Self {
        match m {
            AttentionMode::Inflated => AttentionScope::Inflated,
            AttentionMode::PerFace => AttentionScope::PerFace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub face_latent_size: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per level, outermost first.
    pub channel_mults: Vec<usize>,
    /// Attention per level; the outermost level must be `false`.
    pub attention: Vec<bool>,
    pub heads: usize,
    pub text_dim: usize,
    /// Tokens per caption.
    pub text_tokens: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
    pub gn_eps: f64,
    pub synchronized_gn: bool,
    pub attention_mode: AttentionMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            face_latent_size: 32,
            latent_channels: 12,
            base_channels: 32,
            channel_mults: vec![1, 2, 2, 2],
            attention: vec![false, true, true, true],
            heads: 4,
            text_dim: 32,
            text_tokens: 4,
            time_embed_dim: 64,
            groups: 8,
            gn_eps: 1e-5,
            synchronized_gn: true,
            attention_mode: AttentionMode::Inflated,
        }
    }
}

impl DenoiserConfig {
    /// Latent channels plus `u`, `v` and the conditioning mask.
    pub fn in_channels(&self) -> usize {
        self.latent_channels + 3
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_mults.len() != LEVELS || self.attention.len() != LEVELS {
            return bad(format!("model needs {LEVELS} levels (3 downsamplings) of channel_mults and attention"));
        }
        if self.base_channels == 0 || self.channel_mults.contains(&0) {
            return bad("model has a level without channels".into());
        }
        if self.attention[0] {
            return bad("the outermost level must not use attention".into());
        }
        if self.latent_channels == 0 || self.text_dim == 0 || self.text_tokens == 0 {
            return bad("latent_channels, text_dim and text_tokens must be positive".into());
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and positive".into());
        }
        let div = 1 << (LEVELS - 1);
        if self.face_latent_size < div || self.face_latent_size % div != 0 {
            return bad(format!("face_latent_size must be a positive multiple of {div}"));
        }
        if !(self.gn_eps > 0.0) {
            return bad("gn_eps must be positive".into());
        }
        let mut normed = vec![];
        for l in 0..LEVELS {
            normed.push(self.channels(l));
            if l + 1 < LEVELS {
                normed.push(self.channels(l) + self.channels(l + 1));
            }
        }
        if self.groups == 0 || normed.iter().any(|c| c % self.groups != 0) {
            return bad(format!("group count {} must divide every normalized width {normed:?}", self.groups));
        }
        for l in 0..LEVELS {
            if self.attention[l] && (self.heads == 0 || self.channels(l) % self.heads != 0) {
                return bad(format!("{} heads do not divide level {l} width {}", self.heads, self.channels(l)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: GroupNorm,
    attn: SelfAttention,
    cross: CrossAttention,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct Block {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

/// Everything a forward pass needs besides the assembled input.
#[derive(Debug, Clone)]
pub struct ForwardCond<'a, T> {
    /// Diffusion timestep per batch row.
    pub timesteps: &'a [usize],
    /// `[b, tokens, text_dim]` for [`TextLayout::Shared`], or
    /// `[b, 6 * tokens, text_dim]` for [`TextLayout::PerFace`].
    pub text: &'a Tensor<T>,
    pub text_layout: TextLayout,
    /// Rows whose conditioning image is absent; the Front tokens are hidden
    /// from self-attention keys.
    pub drop_image: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    cfg: DenoiserConfig,
    params: ParamStore<T>,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Block>,
    downsample: Vec<Conv2d>,
    mid: ResBlock,
    up: Vec<Block>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

struct Builder<'a, T> {
    cfg: &'a DenoiserConfig,
    store: &'a mut ParamStore<T>,
    normal: &'a mut dyn FnMut() -> f64,
}

impl<T: Real> Builder<'_, T> {
    fn norm(&mut self, name: &str, ch: usize) -> Result<GroupNorm> {
        Ok(GroupNorm::new(self.store, name, ch, self.cfg.groups, self.cfg.gn_eps, self.cfg.synchronized_gn)?)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Result<Conv2d> {
        Ok(Conv2d::new(self.store, name, cin, cout, k, stride, zero, self.normal)?)
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin)?,
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false)?,
            temb: Linear::new(self.store, &format!("{name}.temb"), self.cfg.time_embed_dim, cout, true, false, self.normal)?,
            norm2: self.norm(&format!("{name}.norm2"), cout)?,
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false)?,
            skip: if cin != cout { Some(self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)?) } else { None },
        })
    }

    fn attn(&mut self, name: &str, ch: usize) -> Result<AttnBlock> {
        let c = self.cfg;
        Ok(AttnBlock {
            norm: self.norm(&format!("{name}.norm"), ch)?,
            attn: SelfAttention::new(self.store, &format!("{name}.self"), ch, c.heads, self.normal)?,
            cross: CrossAttention::new(self.store, &format!("{name}.cross"), ch, c.text_dim, c.heads, self.normal)?,
            proj: Linear::new(self.store, &format!("{name}.proj"), ch, ch, true, true, self.normal)?,
        })
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, attention: bool) -> Result<Block> {
        let res = self.res(&format!("{name}.res"), cin, cout)?;
        let attn = if attention { Some(self.attn(&format!("{name}.attn"), cout)?) } else { None };
        Ok(Block { res, attn })
    }
}

/// Sinusoidal embedding `[sin(t f_k), cos(t f_k)]` with geometric
/// frequencies `f_k = 10000^(-k / half)`.
pub fn timestep_embedding<T: Real>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[timesteps.len(), dim], |i| {
        let (b, k) = (i / dim, i % dim);
        let f = (-(10000f64.ln()) * (k % half) as f64 / half as f64).exp();
        let a = timesteps[b] as f64 * f;
        T::of(if k < half { a.sin() } else { a.cos() })
    })
}

impl<T: Real> Denoiser<T> {
    /// Builds the network with weights drawn from `seed`. Output head and
    /// attention projections start at zero.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = stream(seed, "init", &[]);
        let mut normal = move || -> f64 { StandardNormal.sample(&mut r) };
        let mut b = Builder { cfg: &cfg, store: &mut store, normal: &mut normal };
        let te = cfg.time_embed_dim;
        let time1 = Linear::new(b.store, "time.0", te, te, true, false, b.normal)?;
        let time2 = Linear::new(b.store, "time.1", te, te, true, false, b.normal)?;
        let conv_in = b.conv("conv_in", cfg.in_channels(), cfg.channels(0), 3, 1, false)?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = cfg.channels(0);
        for l in 0..LEVELS {
            down.push(b.block(&format!("down{l}"), prev, cfg.channels(l), cfg.attention[l])?);
            prev = cfg.channels(l);
            if l + 1 < LEVELS {
                downsample.push(b.conv(&format!("downsample{l}"), prev, prev, 3, 2, false)?);
            }
        }
        let mid = b.res("mid", prev, prev)?;
        let mut up = Vec::new();
        for l in 0..LEVELS - 1 {
            let deeper = cfg.channels(l + 1);
            up.push(b.block(&format!("up{l}"), deeper + cfg.channels(l), cfg.channels(l), cfg.attention[l])?);
        }
        let out_norm = b.norm("out.norm", cfg.channels(0))?;
        let out_conv = b.conv("out.conv", cfg.channels(0), cfg.latent_channels, 3, 1, true)?;
        Ok(Denoiser { cfg, params: store, time1, time2, conv_in, down, downsample, mid, up, out_norm, out_conv })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            time1: self.time1.clone(),
            time2: self.time2.clone(),
            conv_in: self.conv_in.clone(),
            down: self.down.clone(),
            downsample: self.downsample.clone(),
            mid: self.mid.clone(),
            up: self.up.clone(),
            out_norm: self.out_norm.clone(),
            out_conv: self.out_conv.clone(),
        }
    }

    fn res_forward(&self, g: &mut Graph<T>, p: &Bound, rb: &ResBlock, x: Var, temb: Var) -> Result<Var> {
        let h = rb.norm1.forward(g, p, x, CUBE_FACES)?;
        let h = g.silu(h)?;
        let h = rb.conv1.forward(g, p, h)?;
        let e = rb.temb.forward(g, p, temb)?;
        let h = g.add_sample_bias(h, e, CUBE_FACES)?;
        let h = rb.norm2.forward(g, p, h, CUBE_FACES)?;
        let h = g.silu(h)?;
        let h = rb.conv2.forward(g, p, h)?;
        let skip = match &rb.skip {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        Ok(g.add(h, skip)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ab: &AttnBlock,
        x: Var,
        text: Var,
        cond: &ForwardCond<T>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
        let scope = self.cfg.attention_mode.into();
        let n = ab.norm.forward(g, p, x, CUBE_FACES)?;
        let t = g.images_to_tokens(n, CUBE_FACES)?;
        let s = ab.attn.forward(g, p, t, CUBE_FACES, scope, mask)?;
        let t = g.add(t, s)?;
        let c = ab.cross.forward(g, p, t, text, cond.text_layout, CUBE_FACES, scope)?;
        let t = g.add(t, c)?;
        let o = ab.proj.forward(g, p, t)?;
        let o = g.tokens_to_images(o, CUBE_FACES, h, w)?;
        Ok(g.add(x, o)?)
    }

    /// Self-attention key mask hiding the Front tokens of rows without an
    /// image condition. Face-local attention needs none: a hidden Front face
    /// would leave its own queries with no visible key.
    fn key_mask(&self, b: usize, plane: usize, drop_image: &[bool]) -> Result<Option<AttentionMask>> {
        if self.cfg.attention_mode == AttentionMode::PerFace || !drop_image.iter().any(|&d| d) {
            return Ok(None);
        }
        let front: Vec<usize> = (FaceId::Front.index() * plane..(FaceId::Front.index() + 1) * plane).collect();
        Ok(Some(condition_attention_mask(CUBE_FACES * plane, &vec![front; b], drop_image)?))
    }

    fn block_forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        blk: &Block,
        x: Var,
        temb: Var,
        text: Var,
        cond: &ForwardCond<T>,
    ) -> Result<Var> {
        let h = self.res_forward(g, p, &blk.res, x, temb)?;
        match &blk.attn {
            None => Ok(h),
            Some(ab) => {
                let s = g.shape(h).to_vec();
                let mask = self.key_mask(s[0] / CUBE_FACES, s[2] * s[3], cond.drop_image)?;
                self.attn_forward(g, p, ab, h, text, cond, mask.as_ref())
            }
        }
    }

    /// Records the forward pass on `g`. `x` is the assembled input as images
    /// `[b * 6, in_channels, n, n]`; the result is the predicted `v` with the
    /// same layout and `latent_channels` channels.
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var, cond: &ForwardCond<T>) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let n = self.cfg.face_latent_size;
        if s.len() != 4 || s[0] % CUBE_FACES != 0 || s[1] != self.cfg.in_channels() || s[2] != n || s[3] != n {
            return Err(Error::Config(format!(
                "input {s:?} does not match [b*6, {}, {n}, {n}]",
                self.cfg.in_channels()
            )));
        }
        let b = s[0] / CUBE_FACES;
        if cond.timesteps.len() != b || cond.drop_image.len() != b {
            return Err(Error::Config("timesteps and drop flags need one entry per batch row".into()));
        }
        let text = g.constant(cond.text.clone())?;

        g.push_scope("time");
        let te = g.constant(timestep_embedding(cond.timesteps, self.cfg.time_embed_dim))?;
        let te = self.time1.forward(g, p, te)?;
        let te = g.silu(te)?;
        let te = self.time2.forward(g, p, te)?;
        let temb = g.silu(te)?;
        g.pop_scope();

        g.push_scope("conv_in");
        let mut h = self.conv_in.forward(g, p, x)?;
        g.pop_scope();
        let mut skips = Vec::new();
        for l in 0..LEVELS {
            g.push_scope(format!("down{l}"));
            h = self.block_forward(g, p, &self.down[l], h, temb, text, cond)?;
            if l + 1 < LEVELS {
                skips.push(h);
                h = self.downsample[l].forward(g, p, h)?;
            }
            g.pop_scope();
        }
        g.push_scope("mid");
        h = self.res_forward(g, p, &self.mid, h, temb)?;
        g.pop_scope();
        for l in (0..LEVELS - 1).rev() {
            g.push_scope(format!("up{l}"));
            h = g.upsample_2x(h)?;
            h = g.concat_channels(h, skips[l])?;
            h = self.block_forward(g, p, &self.up[l], h, temb, text, cond)?;
            g.pop_scope();
        }
        g.push_scope("out");
        h = self.out_norm.forward(g, p, h, CUBE_FACES)?;
        h = g.silu(h)?;
        h = self.out_conv.forward(g, p, h)?;
        g.pop_scope();
        Ok(h)
    }

    /// Inference forward pass on an assembled `[b, 6, in_channels, n, n]`
    /// batch.
    pub fn forward(&self, input: &FaceLatentBatch<T>, cond: &ForwardCond<T>) -> Result<FaceLatentBatch<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let x = g.constant(input.to_images())?;
        let out = self.forward_graph(&mut g, &p, x, cond)?;
        Ok(FaceLatentBatch::from_images(g.value(out).clone())?)
    }
}

/// Exact count of trainable scalars.
pub fn count_parameters<T: Real>(model: &Denoiser<T>) -> usize {
    model.params().numel()
}

/// Global-angle `(u, v)` channels of all faces at latent resolution,
/// `[6, 2, n, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosEnc {
    pub size: usize,
    pub fov_deg: f64,
    data: Vec<f64>,
}

impl PosEnc {
    pub fn new(size: usize, fov_deg: f64) -> Result<Self> {
        let mut data = Vec::with_capacity(CUBE_FACES * 2 * size * size);
        for f in FaceId::ALL {
            let m = positional_encoding(f, size, size, fov_deg)?;
            for ch in 0..2 {
                data.extend(m.data.chunks(2).map(|uv| uv[ch]));
            }
        }
        Ok(PosEnc { size, fov_deg, data })
    }

    /// `[2, n, n]` planes of one face.
    pub fn face(&self, f: usize) -> &[f64] {
        let n = 2 * self.size * self.size;
        &self.data[f * n..(f + 1) * n]
    }

    /// All-zero encoding, for ablations.
    pub fn zeroed(&self) -> PosEnc {
        PosEnc { data: vec![0.0; self.data.len()], ..self.clone() }
    }
}

/// Conditioning for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle<T> {
    /// Clean Front latents `[b, c, n, n]`; `None` generates without an image.
    pub cond_latent: Option<Tensor<T>>,
    /// Text tokens laid out per `text_layout`; see [`ForwardCond::text`].
    pub text_tokens: Tensor<T>,
    pub text_layout: TextLayout,
    pub drop_text: Vec<bool>,
    pub drop_image: Vec<bool>,
}

impl<T: Real> ConditioningBundle<T> {
    pub fn batch(&self) -> usize {
        self.drop_image.len()
    }

    /// Whether row `b` receives the clean Front latent.
    pub fn image_active(&self, b: usize) -> bool {
        self.cond_latent.is_some() && !self.drop_image[b]
    }

    /// Per-row image-absent flags as the network sees them.
    pub fn image_dropped(&self) -> Vec<bool> {
        (0..self.batch()).map(|b| !self.image_active(b)).collect()
    }

    /// Text tokens with dropped rows replaced by the null (zero) tokens.
    pub fn effective_text(&self) -> Tensor<T> {
        let mut t = self.text_tokens.clone();
        let per = t.numel() / self.batch().max(1);
        for (b, &d) in self.drop_text.iter().enumerate() {
            if d {
                t.data_mut()[b * per..(b + 1) * per].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        t
    }

    pub fn validate(&self, latent: (usize, usize, usize, usize)) -> Result<()> {
        let (b, c, h, w) = latent;
        if self.drop_text.len() != b || self.drop_image.len() != b {
            return Err(Error::Config(format!("conditioning flags cover {} rows, batch has {b}", self.drop_image.len())));
        }
        if self.text_tokens.rank() != 3 || self.text_tokens.dim(0) != b {
            return Err(Error::Config(format!("text tokens {:?} for batch {b}", self.text_tokens.shape())));
        }
        if let Some(cl) = &self.cond_latent {
            if cl.shape() != [b, c, h, w] {
                return Err(Error::Config(format!("condition latent {:?}, expected {:?}", cl.shape(), [b, c, h, w])));
            }
        }
        Ok(())
    }
}

/// Concatenates `[latent, u, v, mask]` per face. Rows with an active image
/// condition get the clean Front latent and a mask of 1 on Front; all other
/// faces, and every face of image-dropped rows, keep the noisy latent and a
/// zero mask.
pub fn assemble_input<T: Real>(
    noisy: &FaceLatentBatch<T>,
    bundle: &ConditioningBundle<T>,
    posenc: &PosEnc,
) -> Result<FaceLatentBatch<T>> {
    let (b, _, c, h, w) = noisy.dims();
    bundle.validate((b, c, h, w))?;
    if posenc.size != h || h != w {
        return Err(Error::Config(format!("positional encoding at {} for latents {h}x{w}", posenc.size)));
    }
    let plane = h * w;
    let mut out = FaceLatentBatch::zeros(b, c + 3, h, w);
    for bi in 0..b {
        let active = bundle.image_active(bi);
        for f in 0..CUBE_FACES {
            let dst = out.face_mut(bi, f);
            let src = if active && f == FaceId::Front.index() {
                let cl = bundle.cond_latent.as_ref().expect("active implies latent");
                &cl.data()[bi * c * plane..(bi + 1) * c * plane]
            } else {
                noisy.face(bi, f)
            };
            dst[..c * plane].copy_from_slice(src);
            for (d, &s) in dst[c * plane..(c + 2) * plane].iter_mut().zip(posenc.face(f)) {
                *d = T::of(s);
            }
            let m = if active && f == FaceId::Front.index() { T::one() } else { T::zero() };
            dst[(c + 2) * plane..].iter_mut().for_each(|v| *v = m);
        }
    }
    Ok(out)
}
