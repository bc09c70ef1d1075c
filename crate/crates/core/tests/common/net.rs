use cubepano::net::{Denoiser, DenoiserConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small enough for finite differences on every path.
pub fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        face_latent_size: 8,
        latent_channels: 2,
        base_channels: 4,
        channel_mults: vec![1, 1, 2, 2],
        attention: vec![false, false, true, true],
        heads: 2,
        text_dim: 4,
        text_tokens: 1,
        time_embed_dim: 4,
        groups: 2,
        ..Default::default()
    }
}

/// Fresh weights everywhere, including the zero-initialized output head and
/// attention projections, so every path carries signal.
pub fn scrambled(cfg: DenoiserConfig, seed: u64) -> Denoiser<f64> {
    let mut m = Denoiser::<f64>::new(cfg, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        for v in m.params_mut().get_mut(id).data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    m
}
