#![allow(dead_code)]

pub mod ddim;
pub mod net;

use cubepano::config::RunConfig;
use cubepano::net::DenoiserConfig;
use cubepano::synth::PanoramaKind;
use cubepano::train::TrainConfig;

/// A run small enough to train for a few steps inside a test.
pub fn tiny_run() -> RunConfig {
    RunConfig {
        model: DenoiserConfig {
            face_latent_size: 8,
            latent_channels: 12,
            base_channels: 8,
            channel_mults: vec![1, 1, 2, 2],
            attention: vec![false, false, true, true],
            heads: 2,
            text_dim: 8,
            text_tokens: 2,
            time_embed_dim: 8,
            groups: 4,
            ..Default::default()
        },
        train: TrainConfig {
            steps: 10,
            batch_size: 2,
            peak_lr: 1e-3,
            warmup_steps: 4,
            face_size: 16,
            panorama_height: 32,
            kinds: vec![PanoramaKind::BeaconRoom, PanoramaKind::SkyGradient],
            seed: 5,
            ..Default::default()
        },
        ..Default::default()
    }
}
