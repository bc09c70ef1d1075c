// The three procedural panorama kinds and their captions.

use std::error::Error;

use cubepano::synth::{PanoramaKind, Scene};
use cubepano::FaceId;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    for kind in PanoramaKind::ALL {
        let pano = Scene::new(1, kind).render(64);
        let mean = pano.image().mean_color();
        println!("{kind:?}: \"{}\", mean colour {:.2?}", kind.caption(), mean);
    }
    let room = Scene::new(3, PanoramaKind::BeaconRoom);
    for f in FaceId::ALL {
        println!("  beacon on {:5} {:.2?}", f.name(), room.beacon_color(f).unwrap_or_default());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
