// Train a tiny model for a few steps, checkpoint, resume, then sample.

use std::error::Error;

use cubepano::config::RunConfig;
use cubepano::generate::{Generator, Request};
use cubepano::net::DenoiserConfig;
use cubepano::synth::{PanoramaKind, Scene};
use cubepano::train::{TrainConfig, Trainer};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let mut run = RunConfig {
        model: DenoiserConfig {
            face_latent_size: 8,
            base_channels: 8,
            channel_mults: vec![1, 1, 2, 2],
            heads: 2,
            groups: 4,
            ..Default::default()
        },
        train: TrainConfig { steps: 6, batch_size: 2, peak_lr: 1e-3, warmup_steps: 2, face_size: 16, ..Default::default() },
        ..Default::default()
    };
    run.diffusion.ddim_steps = 10;

    let dir = std::env::temp_dir().join("cubepano_train_example");
    std::fs::create_dir_all(&dir)?;
    let ck = dir.join("tiny.ck");
    let mut tr = Trainer::new(run.clone())?;
    for _ in 0..3 {
        println!("step {} loss {:.4}", tr.step(), tr.train_step()?);
    }
    tr.save(&ck)?;
    let mut tr = Trainer::resume(&ck)?;
    tr.run(|r| Ok(println!("step {} loss {:.4} (resumed)", r.step, r.loss)), |_| Ok(()))?;

    let gen = Generator::new(tr.model(), &run)?;
    let scene = Scene::new(4, PanoramaKind::BeaconRoom);
    let req = Request::from_scene(&scene, PanoramaKind::BeaconRoom, &run)?;
    let mut sampler = run.sampler();
    sampler.cfg_scale_image = 2.0;
    let cm = gen.generate(&[req], &sampler)?.remove(0);
    println!("sampled {} faces of {}px at {} deg", cm.faces().len(), cm.face_size(), cm.fov_deg());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
