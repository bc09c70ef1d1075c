use cubepano::geometry::*;
use cubepano::image::Image;
use cubepano::io::*;
use cubepano::latent::PixelCodec;
use cubepano::projection::*;
use cubepano::synth::*;
use cubepano::text::toy_text_embed;
use cubepano::Error;

fn small_cubemap() -> CubemapImage {
    let eq = synth_panorama(3, PanoramaKind::CheckerSphere, 32);
    equirect_to_cubemap(&eq, 8, 95.0).unwrap()
}

#[test]
fn png_round_trip_is_quantized() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_fn(5, 3, 3, |i, j, px| px.iter_mut().enumerate().for_each(|(c, v)| *v = (i + j + c) as f64 / 9.3));
    let p = dir.path().join("a.png");
    save_png(&img, &p).unwrap();
    let back = load_png(&p).unwrap();
    assert_eq!(back, quantized(&img));
    assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
}

#[test]
fn sixteen_bit_png_loads() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g16.png");
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 1, vec![0u16, 65535]).unwrap();
    buf.save(&p).unwrap();
    let img = load_png(&p).unwrap();
    assert_eq!((img.channels, img.data.clone()), (1, vec![0.0, 1.0]));
}

#[test]
fn equirect_aspect_checked_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sq.png");
    save_png(&Image::filled(8, 8, &[0.5, 0.5, 0.5]), &p).unwrap();
    assert!(matches!(load_equirect(&p), Err(Error::Domain(_))));
}

#[test]
fn cubemap_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("cm");
    let cm = small_cubemap();
    save_cubemap(&cm, &stem).unwrap();
    for f in FaceId::ALL {
        assert!(face_path(&stem, f).exists());
    }
    let back = load_cubemap(&stem).unwrap();
    assert_eq!(back.fov_deg(), 95.0);
    for f in FaceId::ALL {
        assert_eq!(back.face(f), &quantized(cm.face(f)));
    }
}

#[test]
fn missing_faces_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("cm");
    save_cubemap(&small_cubemap(), &stem).unwrap();
    std::fs::remove_file(face_path(&stem, FaceId::Up)).unwrap();
    std::fs::remove_file(face_path(&stem, FaceId::Back)).unwrap();
    let err = load_cubemap(&stem).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("cm_up.png") && msg.contains("cm_back.png"), "{msg}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn sidecar_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("cm");
    save_cubemap(&small_cubemap(), &stem).unwrap();
    std::fs::write(sidecar_path(&stem), r#"{"fov_deg":95,"face_size":8,"channels":3,"extra":1}"#).unwrap();
    assert!(load_cubemap(&stem).is_err());
}

#[test]
fn sidecar_size_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("cm");
    save_cubemap(&small_cubemap(), &stem).unwrap();
    std::fs::write(sidecar_path(&stem), r#"{"fov_deg":95,"face_size":16,"channels":3}"#).unwrap();
    assert!(matches!(load_cubemap(&stem), Err(Error::Image { .. })));
}

#[test]
fn synthetic_panoramas_are_deterministic() {
    for kind in PanoramaKind::ALL {
        assert_eq!(synth_panorama(11, kind, 32).image(), synth_panorama(11, kind, 32).image());
        assert_ne!(synth_panorama(11, kind, 32).image(), synth_panorama(12, kind, 32).image());
    }
}

#[test]
fn kinds_parse_from_captions_and_names() {
    for kind in PanoramaKind::ALL {
        assert!(!kind.caption().is_empty());
    }
    assert_eq!(PanoramaKind::parse("beacon_room"), Some(PanoramaKind::BeaconRoom));
    assert_eq!(PanoramaKind::parse("nope"), None);
}

#[test]
fn sky_rows_are_constant_away_from_the_sun() {
    for seed in 0..5 {
        let scene = Scene::new(seed, PanoramaKind::SkyGradient);
        let Scene::Sky { sun, .. } = scene.clone() else { panic!("sky scene") };
        let eq = scene.render(64);
        let (w, h) = (eq.width(), eq.height());
        for i in 0..h {
            let mut reference: Option<&[f64]> = None;
            for j in 0..w {
                let d = angles_to_direction(pixel_angles(i, j, w, h));
                if d.angle_to(sun) < 15f64.to_radians() {
                    continue;
                }
                let px = eq.image().pixel(i, j);
                match reference {
                    None => reference = Some(px),
                    Some(r) => assert!(r.iter().zip(px).all(|(a, b)| (a - b).abs() < 1e-12), "seed {seed} row {i}"),
                }
            }
        }
    }
}

#[test]
fn checker_cells_tile_exactly() {
    assert_eq!(360.0 % CHECKER_CELL_DEG, 0.0);
    assert_eq!(180.0 % CHECKER_CELL_DEG, 0.0);
    let scene = Scene::new(4, PanoramaKind::CheckerSphere);
    let Scene::Checker { a, b, .. } = scene.clone() else { panic!("checker scene") };
    let eq = scene.render(32);
    assert!(eq.image().data.chunks(3).all(|p| p == a || p == b));
}

#[test]
fn one_beacon_per_face() {
    let pal = beacon_palette();
    for i in 0..6 {
        for j in 0..i {
            let d: f64 = (0..3).map(|k| (pal[i][k] - pal[j][k]).powi(2)).sum::<f64>().sqrt();
            assert!(d > 0.3, "palette {i} {j}");
        }
    }
    for seed in 0..6 {
        let scene = Scene::new(seed, PanoramaKind::BeaconRoom);
        let Scene::Beacons { wall, .. } = scene.clone() else { panic!("beacon scene") };
        let mut seen = Vec::new();
        for f in FaceId::ALL {
            let c = scene.beacon_color(f).unwrap();
            assert_eq!(scene.color(face_frame(f).forward), c);
            // the face corner is 54.7 degrees off axis: wall
            assert_eq!(scene.color(face_uv_to_direction(f, 0.0, 0.0, 90.0).unwrap()), wall);
            assert!(!seen.contains(&c));
            seen.push(c);
        }
    }
    assert_eq!(Scene::new(0, PanoramaKind::SkyGradient).beacon_color(FaceId::Front), None);
}

#[test]
fn distinct_captions_embed_far_apart() {
    let caps: Vec<&str> = PanoramaKind::ALL.iter().map(|k| k.caption()).collect();
    let embs: Vec<_> = caps.iter().map(|c| toy_text_embed(c, 4, 64)).collect();
    for i in 0..embs.len() {
        for j in 0..i {
            for (ra, rb) in embs[i].data().chunks(64).zip(embs[j].data().chunks(64)) {
                let cos: f64 = ra.iter().zip(rb).map(|(a, b)| a * b).sum();
                assert!(cos.abs() < 0.5, "{} vs {}: {cos}", caps[i], caps[j]);
            }
        }
    }
}

#[test]
fn codec_round_trip() {
    let cm = small_cubemap();
    let codec = PixelCodec::new(2, 3).unwrap();
    assert_eq!(codec.latent_channels(), 12);
    let lat = codec.encode::<f64>(&[&cm, &cm]).unwrap();
    assert_eq!(lat.dims(), (2, 6, 12, 4, 4));
    assert!(lat.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let back = codec.decode(&lat, 1, 95.0).unwrap();
    for f in FaceId::ALL {
        assert!(back.face(f).max_abs_diff(cm.face(f)) <= 1e-12);
    }
    assert!(codec.latent_size(9).is_err());
}
