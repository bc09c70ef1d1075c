// Equirect -> overlapping cubemap -> cropped cubemap -> equirect.

use std::error::Error;

use cubepano::io::{save_cubemap, save_png};
use cubepano::projection::{cubemap_to_equirect, equirect_to_cubemap};
use cubepano::synth::{synth_panorama, PanoramaKind};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let pano = synth_panorama(7, PanoramaKind::SkyGradient, 256);
    let wide = equirect_to_cubemap(&pano, 132, 95.0)?;
    let cube = wide.cropped(90.0)?;
    let back = cubemap_to_equirect(&cube, 256)?;
    println!("faces {}px at {} deg, cropped to {} deg", wide.face_size(), wide.fov_deg(), cube.fov_deg());
    println!("round trip PSNR {:.1} dB", back.image().psnr(pano.image()));

    let dir = std::env::temp_dir().join("cubepano_project_example");
    std::fs::create_dir_all(&dir)?;
    save_cubemap(&wide, &dir.join("sky"))?;
    save_png(back.image(), &dir.join("sky_back.png"))?;
    println!("wrote {}", dir.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
