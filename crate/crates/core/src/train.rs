//! Desk-scale training: data, condition dropout, v-prediction loss, Adam.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cubepano_tensor::{Adam, FaceLatentBatch, Graph, Tensor, TextLayout, CUBE_FACES};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::geometry::FaceId;
use crate::io::load_equirect;
use crate::latent::PixelCodec;
use crate::net::{assemble_input, ConditioningBundle, Denoiser, ForwardCond, PosEnc};
use crate::projection::equirect_to_cubemap;
use crate::rng::stream;
use crate::synth::{synth_panorama, PanoramaKind, SYNTH_HEIGHT};
use crate::text::toy_text_embed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub dropout_prob: f64,
    pub seed: u64,
    /// Face size in pixels before folding into latents.
    pub face_size: usize,
    pub overlap_fov_deg: f64,
    /// Synthetic scene kinds drawn uniformly; ignored with `data_dir`.
    pub kinds: Vec<PanoramaKind>,
    pub panorama_height: usize,
    /// Equirect PNGs to train on instead of synthetic scenes. A sibling
    /// `<stem>.txt` holds the caption.
    pub data_dir: Option<PathBuf>,
    /// Checkpoint period in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 8,
            peak_lr: 8e-5,
            warmup_steps: 500,
            dropout_prob: 0.1,
            seed: 0,
            face_size: 64,
            overlap_fov_deg: 95.0,
            kinds: PanoramaKind::ALL.to_vec(),
            panorama_height: SYNTH_HEIGHT,
            data_dir: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.warmup_steps > self.steps {
            return bad("warmup_steps exceeds steps");
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return bad("dropout_prob must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be finite and non-negative");
        }
        if !(self.overlap_fov_deg >= 90.0 && self.overlap_fov_deg < 180.0) {
            return bad("overlap_fov_deg must lie in [90, 180)");
        }
        if self.kinds.is_empty() && self.data_dir.is_none() {
            return bad("no training data: kinds is empty and data_dir unset");
        }
        if self.panorama_height < 2 {
            return bad("panorama_height must be at least 2");
        }
        Ok(())
    }
}

/// Independent text and image dropout flags.
pub fn dropout_conditions<R: Rng>(rng: &mut R, p: f64) -> (bool, bool) {
    let t = rng.random::<f64>() < p;
    let i = rng.random::<f64>() < p;
    (t, i)
}

/// Linear warmup from 0 to `peak_lr`, then constant.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if step >= cfg.warmup_steps {
        cfg.peak_lr
    } else {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    }
}

/// Per-face caption tokens `[6 * tokens, dim]`.
pub fn caption_tokens(captions: &[&str; CUBE_FACES], tokens: usize, dim: usize) -> Tensor<f32> {
    let data = captions.iter().flat_map(|c| toy_text_embed(c, tokens, dim).cast::<f32>().into_data()).collect();
    Tensor::new(&[CUBE_FACES * tokens, dim], data).expect("token shape")
}

/// One sample of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// Clean latents `[6, c, n, n]` at the overlap FoV.
    pub latent: Tensor<f32>,
    /// `[6 * tokens, dim]`.
    pub text: Tensor<f32>,
    pub drop_text: bool,
    pub drop_image: bool,
}

#[derive(Debug, Clone)]
enum DataSource {
    Synthetic(Vec<PanoramaKind>),
    Files(Vec<(Tensor<f32>, Tensor<f32>)>),
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub wallclock_ms: u64,
}

pub struct Trainer {
    run: RunConfig,
    model: Denoiser<f32>,
    opt: Adam<f32>,
    sched: NoiseSchedule,
    codec: PixelCodec,
    posenc: PosEnc,
    data: DataSource,
    step: u64,
}

impl Trainer {
    /// Fresh model initialized from `train.seed`.
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let model = Denoiser::new(run.model.clone(), run.train.seed)?;
        Self::assemble(run, model, None, 0)
    }

    fn assemble(run: RunConfig, model: Denoiser<f32>, opt: Option<Adam<f32>>, step: u64) -> Result<Self> {
        let opt = opt.unwrap_or_else(|| Adam::new(model.params(), 0.9, 0.999, 1e-8));
        let sched = run.schedule()?;
        let codec = run.codec()?;
        let posenc = PosEnc::new(run.model.face_latent_size, run.train.overlap_fov_deg)?;
        let data = match &run.train.data_dir {
            Some(dir) => DataSource::Files(load_dir(dir, &run, &codec)?),
            None => DataSource::Synthetic(run.train.kinds.clone()),
        };
        Ok(Trainer { run, model, opt, sched, codec, posenc, data, step })
    }

    pub fn resume(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let (run, model, opt, step) = ck.into_parts()?;
        Self::assemble(run, model, Some(opt), step)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.run.clone(), self.step, &self.model, Some(&self.opt))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.checkpoint(), path)
    }

    /// Extends or shortens the run; everything else stays as checkpointed.
    pub fn set_total_steps(&mut self, steps: u64) {
        self.run.train.steps = steps;
    }

    /// Completed updates.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &Denoiser<f32> {
        &self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.run
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Example `i` of the batch at `step`; a pure function of the config.
    pub fn example(&self, step: u64, i: usize) -> Result<TrainingExample> {
        let tc = &self.run.train;
        let mc = &self.run.model;
        let mut r = stream(tc.seed, "example", &[step, i as u64]);
        let (latent, text) = match &self.data {
            DataSource::Synthetic(kinds) => {
                let kind = kinds[r.random_range(0..kinds.len())];
                let scene_seed: u64 = r.random();
                let pano = synth_panorama(scene_seed, kind, tc.panorama_height);
                let cm = equirect_to_cubemap(&pano, tc.face_size, tc.overlap_fov_deg)?;
                let lat = self.codec.encode::<f32>(&[&cm])?.into_tensor();
                let c = kind.caption();
                (lat, caption_tokens(&[c; CUBE_FACES], mc.text_tokens, mc.text_dim))
            }
            DataSource::Files(items) => items[r.random_range(0..items.len())].clone(),
        };
        let (n, c) = (mc.face_latent_size, mc.latent_channels);
        let latent = latent.reshape(&[CUBE_FACES, c, n, n])?;
        let mut dr = stream(tc.seed, "dropout", &[step, i as u64]);
        let (drop_text, drop_image) = dropout_conditions(&mut dr, tc.dropout_prob);
        Ok(TrainingExample { latent, text, drop_text, drop_image })
    }

    /// One Adam update on the batch for the current step. Returns the loss
    /// measured before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step;
        let tc = &self.run.train;
        let (b, c, n) = (tc.batch_size, self.run.model.latent_channels, self.run.model.face_latent_size);
        let examples = (0..b).map(|i| self.example(step, i)).collect::<Result<Vec<_>>>()?;
        let face = c * n * n;
        let row = CUBE_FACES * face;

        let mut tr = stream(tc.seed, "timestep", &[step]);
        let timesteps: Vec<usize> = (0..b).map(|_| tr.random_range(0..self.sched.len())).collect();
        let mut er = stream(tc.seed, "noise", &[step]);
        let mut x0 = FaceLatentBatch::zeros(b, c, n, n);
        let mut xt = FaceLatentBatch::zeros(b, c, n, n);
        let mut target = vec![0f32; b * row];
        let mut cond = vec![0f32; b * face];
        for (bi, ex) in examples.iter().enumerate() {
            let co = self.sched.coeffs(timesteps[bi])?;
            let src = ex.latent.data();
            x0.tensor_mut().data_mut()[bi * row..(bi + 1) * row].copy_from_slice(src);
            let xd = &mut xt.tensor_mut().data_mut()[bi * row..(bi + 1) * row];
            for k in 0..row {
                let e: f64 = StandardNormal.sample(&mut er);
                let x = src[k] as f64;
                xd[k] = co.add_noise(x, e) as f32;
                target[bi * row + k] = co.v_target(x, e) as f32;
            }
            let front = FaceId::Front.index() * face;
            cond[bi * face..(bi + 1) * face].copy_from_slice(&src[front..front + face]);
        }
        let text_rows: Vec<f32> = examples.iter().flat_map(|e| e.text.data().iter().copied()).collect();
        let tshape = examples[0].text.shape();
        let bundle = ConditioningBundle {
            cond_latent: Some(Tensor::new(&[b, c, n, n], cond)?),
            text_tokens: Tensor::new(&[b, tshape[0], tshape[1]], text_rows)?,
            text_layout: TextLayout::PerFace,
            drop_text: examples.iter().map(|e| e.drop_text).collect(),
            drop_image: examples.iter().map(|e| e.drop_image).collect(),
        };
        let input = assemble_input(&xt, &bundle, &self.posenc)?;
        let mut weights = vec![1f32; b * CUBE_FACES];
        for bi in 0..b {
            if bundle.image_active(bi) {
                weights[bi * CUBE_FACES + FaceId::Front.index()] = 0.0;
            }
        }

        let text = bundle.effective_text();
        let dropped = bundle.image_dropped();
        let fc = ForwardCond { timesteps: &timesteps, text: &text, text_layout: bundle.text_layout, drop_image: &dropped };
        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g, true)?;
        let xv = g.constant(input.to_images())?;
        let out = self.model.forward_graph(&mut g, &p, xv, &fc)?;
        let target = Tensor::new(&[b * CUBE_FACES, c, n, n], target)?;
        let loss_var = g.mse(out, &target, &weights)?;
        let loss = g.value(loss_var).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step} (timesteps {timesteps:?})")));
        }
        let mut grads = g.backward(loss_var)?;
        let ids: Vec<_> = self.model.params().ids().collect();
        let gl: Vec<Option<Tensor<f32>>> = ids.iter().map(|&id| grads.take(p.var(id))).collect();
        let lr = lr_schedule(step, &self.run.train);
        self.opt.step(self.model.params_mut(), &gl, lr)?;
        self.step += 1;
        Ok(loss)
    }

    /// Trains until `train.steps`, calling `on_log` after every update and
    /// `on_checkpoint` every `checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        mut on_log: impl FnMut(&LogRecord) -> Result<()>,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        let t0 = Instant::now();
        let every = self.run.train.checkpoint_every;
        while self.step < self.run.train.steps {
            let lr = lr_schedule(self.step, &self.run.train);
            let step = self.step;
            let loss = self.train_step()?;
            on_log(&LogRecord { step, lr, loss, wallclock_ms: t0.elapsed().as_millis() as u64 })?;
            if every > 0 && self.step % every == 0 && self.step < self.run.train.steps {
                on_checkpoint(self)?;
            }
        }
        on_checkpoint(self)
    }
}

fn load_dir(dir: &Path, run: &RunConfig, codec: &PixelCodec) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("{}: no PNG panoramas", dir.display())));
    }
    let mc = &run.model;
    paths
        .iter()
        .map(|p| {
            let eq = load_equirect(p)?;
            if eq.channels() != 3 {
                return Err(Error::Image { path: p.clone(), detail: "training panoramas must be RGB".into() });
            }
            let cm = equirect_to_cubemap(&eq, run.train.face_size, run.train.overlap_fov_deg)?;
            let lat = codec.encode::<f32>(&[&cm])?.into_tensor();
            let caption = std::fs::read_to_string(p.with_extension("txt")).unwrap_or_default();
            let caption = caption.trim();
            Ok((lat, caption_tokens(&[caption; CUBE_FACES], mc.text_tokens, mc.text_dim)))
        })
        .collect()
}
