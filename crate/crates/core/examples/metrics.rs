// Seam, wraparound, colour and KID metrics on synthetic panoramas.

use std::error::Error;

use cubepano::eval::*;
use cubepano::projection::equirect_to_cubemap;
use cubepano::synth::{synth_panorama, PanoramaKind};
use cubepano::FaceId;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let sky = synth_panorama(2, PanoramaKind::SkyGradient, 128);
    let mut cube = equirect_to_cubemap(&sky, 32, 90.0)?;
    println!("ground truth: seam {:.4}, wrap {:.4}", seam_discontinuity(&cube)?.mean, wraparound_error(&sky));
    for v in &mut cube.face_mut(FaceId::Left).data {
        *v = (*v + 0.3).min(1.0);
    }
    let s = seam_discontinuity(&cube)?;
    println!("brightened left face: seam {:.4}, max {:.4}, colour divergence {:.4}", s.mean, s.max, face_color_divergence(&cube));

    let fx = PatchStats;
    let feats = |kind, seed| -> Result<Vec<Vec<f64>>, Box<dyn Error>> {
        let eq = synth_panorama(seed, kind, 64);
        Ok(sample_perspective_views(&eq, 40, 60.0, 32, seed)?.iter().map(|v| fx.extract(&v.image)).collect())
    };
    let a = feats(PanoramaKind::SkyGradient, 1)?;
    let b = feats(PanoramaKind::SkyGradient, 2)?;
    let c = feats(PanoramaKind::CheckerSphere, 3)?;
    println!("KID sky/sky {:.4}, sky/checker {:.4}", kid_mmd(&a, &b)?, kid_mmd(&a, &c)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
