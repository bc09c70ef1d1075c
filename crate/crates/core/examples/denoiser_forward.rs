// One forward pass of the multi-view denoiser, inflated vs per-face.

use std::error::Error;

use cubepano::net::{count_parameters, AttentionMode, Denoiser, DenoiserConfig, ForwardCond};
use cubepano_tensor::{FaceLatentBatch, Tensor, TextLayout, CUBE_FACES};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    println!("default model: {} parameters", count_parameters(&Denoiser::<f32>::new(DenoiserConfig::default(), 0)?));

    let cfg = DenoiserConfig { face_latent_size: 8, base_channels: 8, groups: 4, ..Default::default() };
    let x = FaceLatentBatch::new(Tensor::from_fn(&[1, CUBE_FACES, cfg.in_channels(), 8, 8], |i| {
        (i as f32 * 0.37).sin()
    }))?;
    let text = Tensor::zeros(&[1, cfg.text_tokens, cfg.text_dim]);
    let cond = ForwardCond { timesteps: &[500], text: &text, text_layout: TextLayout::Shared, drop_image: &[false] };
    for mode in [AttentionMode::Inflated, AttentionMode::PerFace] {
        let m = Denoiser::<f32>::new(DenoiserConfig { attention_mode: mode, ..cfg.clone() }, 1)?;
        let v = m.forward(&x, &cond)?;
        let rms = (v.tensor().data().iter().map(|a| a * a).sum::<f32>() / v.tensor().numel() as f32).sqrt();
        // the output head starts at zero, so a fresh model predicts v = 0
        println!("{mode:?}: output {:?}, rms {rms:.3e}", v.tensor().shape());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
