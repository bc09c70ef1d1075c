//! The run configuration file shared by every CLI subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{cosine_schedule, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::latent::PixelCodec;
use crate::net::DenoiserConfig;
use crate::train::TrainConfig;

/// Settings for `project` and `assemble`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub face_size: usize,
    pub fov_deg: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { face_size: 128, fov_deg: 90.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Training timesteps.
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub ddim_steps: usize,
    pub cfg_scale_text: f64,
    pub cfg_scale_image: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        DiffusionConfig {
            timesteps: 1000,
            ddim_steps: s.ddim_steps,
            cfg_scale_text: s.cfg_scale_text,
            cfg_scale_image: s.cfg_scale_image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub model: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    /// Seed for sampling and evaluation; training uses `train.seed`.
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Every field, defaults included.
    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.geometry.face_size < 2 || !(self.geometry.fov_deg > 0.0 && self.geometry.fov_deg < 180.0) {
            return Err(Error::Config("geometry needs face_size >= 2 and fov_deg in (0, 180)".into()));
        }
        let sched = self.schedule()?;
        self.sampler().validate(&sched)?;
        self.codec()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        cosine_schedule(self.diffusion.timesteps)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            ddim_steps: self.diffusion.ddim_steps,
            cfg_scale_text: self.diffusion.cfg_scale_text,
            cfg_scale_image: self.diffusion.cfg_scale_image,
            seed: self.seed,
        }
    }

    /// Space-to-depth codec linking `train.face_size` to the model latent.
    pub fn codec(&self) -> Result<PixelCodec> {
        let (px, n) = (self.train.face_size, self.model.face_latent_size);
        if n == 0 || px % n != 0 {
            return Err(Error::Config(format!("train.face_size {px} is not a multiple of face_latent_size {n}")));
        }
        let codec = PixelCodec::new(px / n, 3)?;
        if codec.latent_channels() != self.model.latent_channels {
            return Err(Error::Config(format!(
                "a {px}px face folds into {} latent channels, model has {}",
                codec.latent_channels(),
                self.model.latent_channels
            )));
        }
        Ok(codec)
    }
}
