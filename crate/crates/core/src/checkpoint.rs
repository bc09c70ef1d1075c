//! Binary checkpoints.
//!
//! Layout: magic `CPAN1`, a little-endian `u32` metadata length, the JSON
//! metadata, then raw little-endian `f32` blobs at the manifest offsets
//! (relative to the end of the metadata).

use std::fs;
use std::path::Path;

use cubepano_tensor::{Adam, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::net::Denoiser;

pub const MAGIC: &[u8; 5] = b"CPAN1";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob section.
    pub offset: u64,
}

/// Random streams are keyed by `(seed, step)`, so this is the whole state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: RunConfig,
    step: u64,
    rng: RngState,
    parameter_count: usize,
    adam: Option<AdamState>,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub adam: Option<AdamState>,
    /// Parameters first, then Adam moments as `adam.m/<name>`, `adam.v/<name>`.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config: RunConfig, step: u64, model: &Denoiser<f32>, opt: Option<&Adam<f32>>) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let adam = opt.map(|o| {
            for ((n, _), m) in model.params().iter().zip(&o.m) {
                tensors.push((format!("{ADAM_M}{n}"), m.clone()));
            }
            for ((n, _), v) in model.params().iter().zip(&o.v) {
                tensors.push((format!("{ADAM_V}{n}"), v.clone()));
            }
            AdamState { t: o.t, beta1: o.beta1, beta2: o.beta2, eps: o.eps }
        });
        Checkpoint { config, step, adam, tensors }
    }

    fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Rebuilds the model, and the optimizer when one was saved.
    pub fn model(&self) -> Result<Denoiser<f32>> {
        let mut model = Denoiser::new(self.config.model.clone(), self.config.train.seed)?;
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let name = model.params().name(id).to_string();
            let t = self.get(&name)?;
            let dst = model.params_mut().get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, model expects {:?}", t.shape(), dst.shape())));
            }
            *dst = t.clone();
        }
        let params = model.params().len() + self.adam.as_ref().map_or(0, |_| 2 * model.params().len());
        if params != self.tensors.len() {
            return Err(Error::Checkpoint(format!("{} tensors, model expects {params}", self.tensors.len())));
        }
        Ok(model)
    }

    pub fn into_parts(self) -> Result<(RunConfig, Denoiser<f32>, Adam<f32>, u64)> {
        let model = self.model()?;
        let a = self.adam.clone().ok_or_else(|| Error::Checkpoint("no optimizer state to resume from".into()))?;
        let mut opt = Adam::new(model.params(), a.beta1, a.beta2, a.eps);
        opt.t = a.t;
        for (i, (n, _)) in model.params().iter().enumerate() {
            opt.m[i] = self.get(&format!("{ADAM_M}{n}"))?.clone();
            opt.v[i] = self.get(&format!("{ADAM_V}{n}"))?.clone();
        }
        Ok((self.config, model, opt, self.step))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            manifest.push(ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f32".into(), offset });
            offset += 4 * t.numel() as u64;
        }
        let n_params = self.tensors.iter().filter(|(n, _)| !n.starts_with("adam.")).map(|(_, t)| t.numel()).sum();
        let meta = Metadata {
            config: self.config.clone(),
            step: self.step,
            rng: RngState { seed: self.config.train.seed, step: self.step },
            parameter_count: n_params,
            adam: self.adam.clone(),
            manifest,
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(9 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Err(Error::Checkpoint(m));
        if bytes.len() < 9 {
            return err(format!("file too short ({} bytes)", bytes.len()));
        }
        if &bytes[..5] != MAGIC {
            if &bytes[..4] == b"CPAN" {
                return err(format!("unsupported format version {:?}", bytes[4] as char));
            }
            return err("bad magic, not a checkpoint".into());
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let Some(json) = bytes.get(9..9 + len) else {
            return err("truncated metadata".into());
        };
        let meta: Metadata =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("corrupt metadata: {e}")))?;
        meta.config.validate().map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
        let blobs = &bytes[9 + len..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(meta.manifest.len());
        for e in &meta.manifest {
            if e.dtype != "f32" {
                return err(format!("{}: unsupported dtype {}", e.name, e.dtype));
            }
            if e.offset != expected {
                return err(format!("{}: offset {} overlaps or leaves a gap (expected {expected})", e.name, e.offset));
            }
            let numel: usize = e.shape.iter().product();
            let end = e.offset + 4 * numel as u64;
            let Some(raw) = blobs.get(e.offset as usize..end as usize) else {
                return err(format!("{}: blob truncated ({} of {end} bytes present)", e.name, blobs.len()));
            };
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
            expected = end;
        }
        if blobs.len() as u64 != expected {
            return err(format!("{} trailing bytes after the last blob", blobs.len() as u64 - expected));
        }
        if meta.rng.step != meta.step || meta.rng.seed != meta.config.train.seed {
            return err("rng state disagrees with step or seed".into());
        }
        Ok(Checkpoint { config: meta.config, step: meta.step, adam: meta.adam, tensors })
    }
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ck.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        e => e,
    })
}
