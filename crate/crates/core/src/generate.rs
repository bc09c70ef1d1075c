//! Panorama generation from a trained denoiser.

use cubepano_tensor::{Tensor, TextLayout, CUBE_FACES};

use crate::config::RunConfig;
use crate::diffusion::{ddim_sample, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::PixelCodec;
use crate::net::{ConditioningBundle, Denoiser, PosEnc};
use crate::projection::{equirect_to_cubemap, CubemapImage};
use crate::synth::{PanoramaKind, Scene};
use crate::train::caption_tokens;

/// What to generate: an optional Front image at the model's face size and
/// overlap FoV, plus one caption per face.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub front: Option<Image>,
    pub captions: [String; CUBE_FACES],
}

impl Request {
    pub fn single_prompt(front: Option<Image>, caption: &str) -> Self {
        Request { front, captions: std::array::from_fn(|_| caption.to_string()) }
    }

    /// Conditioned on the Front face of a synthetic scene.
    pub fn from_scene(scene: &Scene, kind: PanoramaKind, run: &RunConfig) -> Result<Self> {
        let tc = &run.train;
        let cm = equirect_to_cubemap(&scene.render(tc.panorama_height), tc.face_size, tc.overlap_fov_deg)?;
        Ok(Self::single_prompt(Some(cm.face(crate::FaceId::Front).clone()), kind.caption()))
    }
}

pub struct Generator<'a> {
    model: &'a Denoiser<f32>,
    run: &'a RunConfig,
    sched: NoiseSchedule,
    codec: PixelCodec,
    posenc: PosEnc,
}

impl<'a> Generator<'a> {
    pub fn new(model: &'a Denoiser<f32>, run: &'a RunConfig) -> Result<Self> {
        let sched = run.schedule()?;
        let codec = run.codec()?;
        let posenc = PosEnc::new(run.model.face_latent_size, run.train.overlap_fov_deg)?;
        Ok(Generator { model, run, sched, codec, posenc })
    }

    /// Generates one cubemap per request at the overlap FoV. Requests run
    /// as a single batch; either all or none carry a Front image.
    pub fn generate(&self, requests: &[Request], sampler: &SamplerConfig) -> Result<Vec<CubemapImage>> {
        let b = requests.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let mc = &self.run.model;
        let with_image = requests[0].front.is_some();
        if requests.iter().any(|r| r.front.is_some() != with_image) {
            return Err(Error::Config("mixed conditioned and unconditioned requests".into()));
        }
        let cond_latent = if with_image {
            let mut data = Vec::new();
            for r in requests {
                let img = r.front.as_ref().expect("checked");
                if img.width != self.run.train.face_size || img.height != img.width {
                    return Err(Error::Config(format!(
                        "front image is {}x{}, model expects {2}x{2}",
                        img.width, img.height, self.run.train.face_size
                    )));
                }
                data.extend(self.codec.encode_image::<f32>(img)?.into_data());
            }
            let n = mc.face_latent_size;
            Some(Tensor::new(&[b, mc.latent_channels, n, n], data)?)
        } else {
            None
        };
        let mut text = Vec::new();
        for r in requests {
            let caps: [&str; CUBE_FACES] = std::array::from_fn(|f| r.captions[f].as_str());
            text.extend(caption_tokens(&caps, mc.text_tokens, mc.text_dim).into_data());
        }
        let bundle = ConditioningBundle {
            cond_latent,
            text_tokens: Tensor::new(&[b, CUBE_FACES * mc.text_tokens, mc.text_dim], text)?,
            text_layout: TextLayout::PerFace,
            drop_text: vec![false; b],
            drop_image: vec![false; b],
        };
        let lat = ddim_sample(self.model, &bundle, &self.posenc, &self.sched, mc.latent_channels, sampler)?;
        (0..b)
            .map(|i| {
                let cm = self.codec.decode(&lat, i, self.run.train.overlap_fov_deg)?;
                let faces = cm.faces().iter().map(|f| f.map(|v| v.clamp(0.0, 1.0))).collect();
                CubemapImage::new(faces, cm.fov_deg())
            })
            .collect()
    }
}
