//! The `cubepano` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::eval::{
    face_color_divergence, kid_mmd, sample_perspective_views, seam_discontinuity, wraparound_error, FeatureExtractor,
    PatchStats,
};
use crate::generate::{Generator, Request};
use crate::geometry::FaceId;
use crate::image::{Image, Wrap};
use crate::io::{load_cubemap, load_equirect, load_png, save_cubemap, save_png};
use crate::projection::{cubemap_to_equirect, equirect_to_cubemap, CubemapImage};
use crate::train::{LogRecord, Trainer};

#[derive(Debug, Parser)]
#[command(name = "cubepano", version, about = "Cubemap panorama diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Equirect PNG to six cube faces plus a JSON sidecar.
    Project {
        input: PathBuf,
        out_stem: PathBuf,
        #[arg(long)]
        face_size: Option<usize>,
        #[arg(long)]
        fov: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Cube faces back to an equirect PNG, cropping overlapping faces to 90 degrees.
    Assemble {
        stem: PathBuf,
        out: PathBuf,
        /// Output height; defaults to twice the face size.
        #[arg(long)]
        height: Option<usize>,
    },
    /// Train a denoiser; writes a checkpoint and a JSONL log.
    Train(TrainArgs),
    /// Generate panoramas from a checkpoint.
    Sample(SampleArgs),
    /// Print a metric report as JSON.
    Eval(EvalArgs),
    /// Run configuration utilities.
    Config {
        #[command(subcommand)]
        cmd: ConfigCmd,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration; optional when resuming.
    config: Option<PathBuf>,
    #[arg(long, default_value = "model.ck")]
    out: PathBuf,
    #[arg(long, default_value = "train_log.jsonl")]
    log: PathBuf,
    /// Continue from this checkpoint. A config given alongside may only
    /// change `train.steps`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Front condition: a square face image or an equirect panorama.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, conflicts_with = "prompt_face")]
    prompt: Option<String>,
    /// `face:text`, given once for each of the six faces.
    #[arg(long)]
    prompt_face: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_text: Option<f64>,
    #[arg(long)]
    cfg_image: Option<f64>,
    /// Height of the assembled panorama; defaults to twice the face size.
    #[arg(long)]
    height: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Metric {
    Seam,
    Wrap,
    Color,
    Kid,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    /// Cubemap stems for seam and color, equirect PNGs for wrap and kid.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Second panorama set for kid.
    #[arg(long, num_args = 1..)]
    reference: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Perspective views per panorama for kid.
    #[arg(long, default_value_t = 10)]
    views: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ConfigCmd {
    /// Print the full configuration, defaults included.
    Dump { config: Option<PathBuf> },
}

/// Metric report printed by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Serialize)]
struct SampleMeta<'a> {
    seed: u64,
    ddim_steps: usize,
    cfg_scale_text: f64,
    cfg_scale_image: f64,
    conditioned: bool,
    captions: &'a [String; 6],
    config_hash: String,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Reports go to `out`, errors to `err`.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 { write!(out, "{}", e.render()) } else { write!(err, "{}", e.render()) };
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.cmd {
        Command::Project { input, out_stem, face_size, fov, config } => {
            let cfg = load_config(config.as_deref())?;
            let eq = load_equirect(&input)?;
            let size = face_size.unwrap_or(cfg.geometry.face_size);
            let cm = equirect_to_cubemap(&eq, size, fov.unwrap_or(cfg.geometry.fov_deg))?;
            save_cubemap(&cm, &out_stem)
        }
        Command::Assemble { stem, out, height } => {
            let cm = load_cubemap(&stem)?;
            let h = height.unwrap_or(2 * cm.face_size());
            save_png(assemble(&cm, h)?.image(), &out)
        }
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => {
            let report = evaluate(&a)?;
            writeln!(out, "{}", serde_json::to_string(&report).expect("report serializes")).map_err(|e| Error::io("stdout", e))
        }
        Command::Config { cmd: ConfigCmd::Dump { config } } => {
            let cfg = load_config(config.as_deref())?;
            writeln!(out, "{}", cfg.dump()).map_err(|e| Error::io("stdout", e))
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Crops overlapping faces to 90 degrees, then resamples to an equirect.
fn assemble(cm: &CubemapImage, height: usize) -> Result<crate::projection::EquirectImage> {
    if cm.fov_deg() > 90.0 {
        cubemap_to_equirect(&cm.cropped(90.0)?, height)
    } else {
        cubemap_to_equirect(cm, height)
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut trainer = match (&a.resume, &a.config) {
        (Some(ck), cfg) => {
            let mut t = Trainer::resume(ck)?;
            if let Some(p) = cfg {
                let want = RunConfig::load(p)?;
                let mut have = t.config().clone();
                have.train.steps = want.train.steps;
                if have != want {
                    return Err(Error::Config(format!(
                        "{} differs from the checkpoint's config beyond train.steps",
                        p.display()
                    )));
                }
                t.set_total_steps(want.train.steps);
            }
            t
        }
        (None, Some(p)) => Trainer::new(RunConfig::load(p)?)?,
        (None, None) => return Err(Error::Config("train needs a config file or --resume".into())),
    };
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&a.log)
        .map_err(|e| Error::io(&a.log, e))?;
    let log_path = a.log.clone();
    let out = a.out.clone();
    trainer.run(
        |r: &LogRecord| {
            writeln!(log, "{}", serde_json::to_string(r).expect("log serializes")).map_err(|e| Error::io(&log_path, e))
        },
        |t| t.save(&out),
    )
}

fn parse_face_prompts(items: &[String]) -> Result<[String; 6]> {
    if items.len() != 6 {
        return Err(Error::Config(format!("--prompt-face needs all 6 faces, got {}", items.len())));
    }
    let mut caps: [Option<String>; 6] = Default::default();
    for it in items {
        let (face, text) = it
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("--prompt-face {it:?} is not face:text")))?;
        let f = FaceId::parse(face).ok_or_else(|| Error::Config(format!("unknown face {face:?}")))?;
        if caps[f.index()].replace(text.to_string()).is_some() {
            return Err(Error::Config(format!("face {face} given twice")));
        }
    }
    Ok(caps.map(|c| c.expect("six distinct faces")))
}

/// Bilinear resize of a square image.
fn resize(img: &Image, size: usize) -> Image {
    if img.width == size && img.height == size {
        return img.clone();
    }
    let (sx, sy) = (img.width as f64 / size as f64, img.height as f64 / size as f64);
    Image::from_fn(size, size, img.channels, |i, j, px| {
        img.sample((j as f64 + 0.5) * sx, (i as f64 + 0.5) * sy, Wrap::Clamp, px)
    })
}

fn front_condition(path: &Path, run: &RunConfig) -> Result<Image> {
    let img = load_png(path)?;
    if img.channels != 3 {
        return Err(Error::Image { path: path.into(), detail: "condition image must be RGB".into() });
    }
    let size = run.train.face_size;
    if img.width == 2 * img.height {
        let eq = crate::projection::EquirectImage::new(img)?;
        Ok(equirect_to_cubemap(&eq, size, run.train.overlap_fov_deg)?.face(FaceId::Front).clone())
    } else if img.width == img.height {
        Ok(resize(&img, size))
    } else {
        Err(Error::Domain(format!(
            "{}: condition must be square or a 2:1 panorama, got {}x{}",
            path.display(),
            img.width,
            img.height
        )))
    }
}

fn sample(a: SampleArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let run = ck.config.clone();
    let model = ck.model()?;
    let captions = if !a.prompt_face.is_empty() {
        parse_face_prompts(&a.prompt_face)?
    } else {
        std::array::from_fn(|_| a.prompt.clone().unwrap_or_default())
    };
    let front = a.image.as_deref().map(|p| front_condition(p, &run)).transpose()?;
    let conditioned = front.is_some();
    let base = run.sampler();
    let sampler = SamplerConfig {
        ddim_steps: a.steps.unwrap_or(base.ddim_steps),
        cfg_scale_text: a.cfg_text.unwrap_or(base.cfg_scale_text),
        cfg_scale_image: a.cfg_image.unwrap_or(base.cfg_scale_image),
        seed: a.seed.unwrap_or(base.seed),
    };
    let request = Request { front, captions };
    let cm = Generator::new(&model, &run)?.generate(std::slice::from_ref(&request), &sampler)?.remove(0);
    save_cubemap(&cm, &a.out)?;
    let h = a.height.unwrap_or(2 * run.train.face_size);
    save_png(assemble(&cm, h)?.image(), &stem_with(&a.out, ".png"))?;
    let meta = SampleMeta {
        seed: sampler.seed,
        ddim_steps: sampler.ddim_steps,
        cfg_scale_text: sampler.cfg_scale_text,
        cfg_scale_image: sampler.cfg_scale_image,
        conditioned,
        captions: &request.captions,
        config_hash: run.config_hash(),
    };
    let p = stem_with(&a.out, "_meta.json");
    fs::write(&p, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(|e| Error::io(&p, e))
}

fn stem_with(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn kid_features(paths: &[PathBuf], views: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let fx = PatchStats;
    let mut feats = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let eq = load_equirect(p)?;
        for v in sample_perspective_views(&eq, views, 60.0, 64, seed.wrapping_add(i as u64))? {
            feats.push(fx.extract(&v.image));
        }
    }
    Ok(feats)
}

fn evaluate(a: &EvalArgs) -> Result<MetricReport> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let value = match a.metric {
        Metric::Seam => {
            let v = a
                .inputs
                .iter()
                .map(|s| {
                    let cm = load_cubemap(s)?;
                    let cm = if cm.fov_deg() > 90.0 { cm.cropped(90.0)? } else { cm };
                    Ok(seam_discontinuity(&cm)?.mean)
                })
                .collect::<Result<Vec<_>>>()?;
            mean(v)
        }
        Metric::Color => mean(a.inputs.iter().map(|s| Ok(face_color_divergence(&load_cubemap(s)?))).collect::<Result<_>>()?),
        Metric::Wrap => mean(a.inputs.iter().map(|p| Ok(wraparound_error(&load_equirect(p)?))).collect::<Result<_>>()?),
        Metric::Kid => {
            if a.reference.is_empty() {
                return Err(Error::Config("kid needs --reference panoramas".into()));
            }
            let fa = kid_features(&a.inputs, a.views, seed)?;
            let fb = kid_features(&a.reference, a.views, seed)?;
            kid_mmd(&fa, &fb)?
        }
    };
    let metric = serde_json::to_value(a.metric).expect("metric name").as_str().expect("string").to_string();
    Ok(MetricReport { metric, value, n: a.inputs.len(), seed, config_hash: cfg.config_hash() })
}
