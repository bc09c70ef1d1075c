//! Variance-preserving noise schedule, v-parameterization, classifier-free
//! guidance and the deterministic DDIM sampler.

use std::f64::consts::FRAC_PI_2;

use cubepano_tensor::{FaceLatentBatch, Real, Tensor, TensorError};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FaceId;
use crate::net::{assemble_input, ConditioningBundle, Denoiser, ForwardCond, PosEnc};
use crate::rng::stream;

const COSINE_OFFSET: f64 = 0.008;

/// Signal and noise coefficients at one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub alpha: f64,
    pub sigma: f64,
}

impl Coeffs {
    pub fn add_noise(self, x0: f64, eps: f64) -> f64 {
        self.alpha * x0 + self.sigma * eps
    }

    pub fn v_target(self, x0: f64, eps: f64) -> f64 {
        self.alpha * eps - self.sigma * x0
    }

    pub fn x0_from_v(self, xt: f64, v: f64) -> f64 {
        self.alpha * xt - self.sigma * v
    }

    pub fn eps_from_v(self, xt: f64, v: f64) -> f64 {
        self.sigma * xt + self.alpha * v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

/// Squared-cosine schedule with offset 0.008, normalized so `alpha[0] = 1`.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 timesteps, got {steps}")));
    }
    let s = COSINE_OFFSET;
    let f = |t: usize| ((t as f64 / steps as f64 + s) / (1.0 + s) * FRAC_PI_2).cos();
    let f0 = f(0);
    let alpha: Vec<f64> = (0..steps).map(|t| f(t) / f0).collect();
    let sigma = alpha.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
    Ok(NoiseSchedule { alpha, sigma })
}

impl NoiseSchedule {
    /// Number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn coeffs(&self, t: usize) -> Result<Coeffs> {
        if t >= self.len() {
            return Err(Error::Domain(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(Coeffs { alpha: self.alpha[t], sigma: self.sigma[t] })
    }
}

fn binary<T: Real>(a: &[T], b: &[T], what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(Error::Config(format!("{what}: lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| T::of(f(x.f64(), y.f64()))).collect())
}

/// `x_t = alpha[t] x0 + sigma[t] eps`.
pub fn add_noise<T: Real>(x0: &[T], eps: &[T], t: usize, sched: &NoiseSchedule) -> Result<Vec<T>> {
    let c = sched.coeffs(t)?;
    binary(x0, eps, "add_noise", |x, e| c.add_noise(x, e))
}

/// `v = alpha[t] eps - sigma[t] x0`.
pub fn v_target<T: Real>(x0: &[T], eps: &[T], t: usize, sched: &NoiseSchedule) -> Result<Vec<T>> {
    let c = sched.coeffs(t)?;
    binary(x0, eps, "v_target", |x, e| c.v_target(x, e))
}

pub fn x0_from_v<T: Real>(xt: &[T], v: &[T], t: usize, sched: &NoiseSchedule) -> Result<Vec<T>> {
    let c = sched.coeffs(t)?;
    binary(xt, v, "x0_from_v", |x, v| c.x0_from_v(x, v))
}

pub fn eps_from_v<T: Real>(xt: &[T], v: &[T], t: usize, sched: &NoiseSchedule) -> Result<Vec<T>> {
    let c = sched.coeffs(t)?;
    binary(xt, v, "eps_from_v", |x, v| c.eps_from_v(x, v))
}

/// `uncond + scale * (cond - uncond)`.
pub fn cfg_combine<T: Real>(uncond: &[T], cond: &[T], scale: f64) -> Result<Vec<T>> {
    if scale == 1.0 {
        return binary(uncond, cond, "cfg_combine", |_, c| c);
    }
    if scale == 0.0 {
        return binary(uncond, cond, "cfg_combine", |u, _| u);
    }
    binary(uncond, cond, "cfg_combine", |u, c| u + scale * (c - u))
}

/// Two-axis guidance from the unconditional output `u`, the text-only
/// output `ct` and the text+image output `cti`:
/// `u + s_text (ct - u) + s_image (cti - ct)`.
pub fn cfg_combine_dual<T: Real>(u: &[T], ct: &[T], cti: &[T], s_text: f64, s_image: f64) -> Result<Vec<T>> {
    if u.len() != ct.len() || ct.len() != cti.len() {
        return Err(Error::Config("cfg_combine_dual: length mismatch".into()));
    }
    Ok(u.iter()
        .zip(ct)
        .zip(cti)
        .map(|((&u, &ct), &cti)| {
            let (u, ct, cti) = (u.f64(), ct.f64(), cti.f64());
            T::of(u + s_text * (ct - u) + s_image * (cti - ct))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub cfg_scale_text: f64,
    pub cfg_scale_image: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { ddim_steps: 50, cfg_scale_text: 1.0, cfg_scale_image: 1.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.ddim_steps == 0 || self.ddim_steps > sched.len() {
            return Err(Error::Config(format!("ddim_steps {} outside [1, {}]", self.ddim_steps, sched.len())));
        }
        if !self.cfg_scale_text.is_finite() || !self.cfg_scale_image.is_finite() {
            return Err(Error::Config("guidance scales must be finite".into()));
        }
        Ok(())
    }
}

/// Descending timesteps `round(i (T-1) / (S-1))`, `i = S-1 .. 0`; a single
/// step starts at `T-1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    if steps <= 1 {
        return vec![total - 1];
    }
    (0..steps)
        .rev()
        .map(|i| ((i * (total - 1)) as f64 / (steps - 1) as f64).round() as usize)
        .collect()
}

/// Anything that maps an assembled input to a v-prediction.
pub trait VModel<T: Real> {
    fn predict_v(&self, input: &FaceLatentBatch<T>, cond: &ForwardCond<T>) -> Result<FaceLatentBatch<T>>;
}

impl<T: Real> VModel<T> for Denoiser<T> {
    fn predict_v(&self, input: &FaceLatentBatch<T>, cond: &ForwardCond<T>) -> Result<FaceLatentBatch<T>> {
        self.forward(input, cond)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    Uncond,
    Text,
    Full,
}

/// Which guidance branches a step needs.
fn variants(cfg: &SamplerConfig, has_image: bool) -> Vec<Variant> {
    let (st, si) = (cfg.cfg_scale_text, cfg.cfg_scale_image);
    if !has_image {
        return if st == 1.0 { vec![Variant::Full] } else { vec![Variant::Uncond, Variant::Full] };
    }
    match (st == 1.0, si == 1.0) {
        (true, true) => vec![Variant::Full],
        (true, false) => vec![Variant::Text, Variant::Full],
        _ => vec![Variant::Uncond, Variant::Text, Variant::Full],
    }
}

fn concat_rows<T: Real>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.dim(0)).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(Tensor::new(&shape, data)?)
}

/// Deterministic DDIM (eta = 0) from pure noise drawn from `cfg.seed`.
/// Rows with an active image condition keep their clean Front latent
/// throughout and in the result. Returns the final `x0` estimate.
pub fn ddim_sample<T: Real, M: VModel<T>>(
    model: &M,
    bundle: &ConditioningBundle<T>,
    posenc: &PosEnc,
    sched: &NoiseSchedule,
    latent_channels: usize,
    cfg: &SamplerConfig,
) -> Result<FaceLatentBatch<T>> {
    cfg.validate(sched)?;
    let b = bundle.batch();
    let n = posenc.size;
    let mut r = stream(cfg.seed, "ddim", &[]);
    let mut x = FaceLatentBatch::<T>::zeros(b, latent_channels, n, n);
    for v in x.tensor_mut().data_mut() {
        let e: f64 = StandardNormal.sample(&mut r);
        *v = T::of(e);
    }
    bundle.validate((b, latent_channels, n, n))?;

    let has_image = (0..b).any(|i| bundle.image_active(i));
    let vars = variants(cfg, has_image);
    let mut branches = Vec::new();
    for &v in &vars {
        let mut bb = bundle.clone();
        if v == Variant::Uncond {
            bb.drop_text = vec![true; b];
        }
        if v != Variant::Full {
            bb.drop_image = vec![true; b];
        }
        branches.push(bb);
    }
    let texts: Vec<Tensor<T>> = branches.iter().map(|bb| bb.effective_text()).collect();
    let text = concat_rows(&texts)?;
    let drop: Vec<bool> = branches.iter().flat_map(|bb| bb.image_dropped()).collect();

    let ts = ddim_timesteps(sched.len(), cfg.ddim_steps);
    let mut x0 = x.clone();
    for (k, &t) in ts.iter().enumerate() {
        let inputs: Vec<Tensor<T>> =
            branches.iter().map(|bb| assemble_input(&x, bb, posenc).map(|a| a.into_tensor())).collect::<Result<_>>()?;
        let input = FaceLatentBatch::new(concat_rows(&inputs)?)?;
        let timesteps = vec![t; b * vars.len()];
        let fc = ForwardCond { timesteps: &timesteps, text: &text, text_layout: bundle.text_layout, drop_image: &drop };
        let out = model.predict_v(&input, &fc).map_err(|e| match e {
            Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFinite(_) => {
                Error::NonFinite(format!("ddim step {k} (t = {t}): {e}"))
            }
            e => e,
        })?;
        let per = x.tensor().numel();
        let od = out.tensor().data();
        let part = |v: Variant| {
            let i = vars.iter().position(|&w| w == v).expect("variant evaluated");
            &od[i * per..(i + 1) * per]
        };
        let v = match vars.as_slice() {
            [_] => part(Variant::Full).to_vec(),
            [Variant::Uncond, _] => cfg_combine(part(Variant::Uncond), part(Variant::Full), cfg.cfg_scale_text)?,
            [_, _] => cfg_combine(part(Variant::Text), part(Variant::Full), cfg.cfg_scale_image)?,
            _ => cfg_combine_dual(
                part(Variant::Uncond),
                part(Variant::Text),
                part(Variant::Full),
                cfg.cfg_scale_text,
                cfg.cfg_scale_image,
            )?,
        };
        let c = sched.coeffs(t)?;
        let xd = x.tensor().data();
        let x0d: Vec<T> = xd.iter().zip(&v).map(|(&x, &v)| T::of(c.x0_from_v(x.f64(), v.f64()))).collect();
        if x0d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("ddim step {k} (t = {t})")));
        }
        if let Some(&tn) = ts.get(k + 1) {
            let cn = sched.coeffs(tn)?;
            let next: Vec<T> = xd
                .iter()
                .zip(&v)
                .zip(&x0d)
                .map(|((&x, &v), &x0)| T::of(cn.add_noise(x0.f64(), c.eps_from_v(x.f64(), v.f64()))))
                .collect();
            x.tensor_mut().data_mut().copy_from_slice(&next);
        }
        x0.tensor_mut().data_mut().copy_from_slice(&x0d);
    }
    if let Some(cl) = &bundle.cond_latent {
        let len = x0.face_len();
        for bi in (0..b).filter(|&bi| bundle.image_active(bi)) {
            x0.face_mut(bi, FaceId::Front.index()).copy_from_slice(&cl.data()[bi * len..(bi + 1) * len]);
        }
    }
    Ok(x0)
}
