use std::f64::consts::FRAC_PI_2;

use cubepano::eval::*;
use cubepano::geometry::*;
use cubepano::image::Image;
use cubepano::projection::*;
use cubepano::synth::*;
use cubepano::Error;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smooth_pano(height: usize) -> EquirectImage {
    EquirectImage::from_fn(height, 3, |a, px| {
        let d = angles_to_direction(a);
        px[0] = 0.5 + 0.3 * d.x;
        px[1] = 0.5 + 0.3 * d.y;
        px[2] = 0.5 + 0.2 * d.z * d.x;
    })
}

#[test]
fn ground_truth_cubemaps_have_small_seams() {
    let cm = equirect_to_cubemap(&smooth_pano(512), 128, 90.0).unwrap();
    let r = seam_discontinuity(&cm).unwrap();
    assert_eq!(r.edges.len(), 12);
    assert!(r.mean <= 0.01, "{}", r.mean);
    for seed in 0..3 {
        let cm = equirect_to_cubemap(&synth_panorama(seed, PanoramaKind::SkyGradient, 512), 128, 90.0).unwrap();
        let m = seam_discontinuity(&cm).unwrap().mean;
        assert!(m <= 0.01, "sky {seed}: {m}");
    }
}

#[test]
fn constant_cubemap_has_no_seams() {
    let cm = CubemapImage::filled(8, 90.0, &[0.3, 0.6, 0.1]).unwrap();
    let r = seam_discontinuity(&cm).unwrap();
    assert_eq!((r.mean, r.max), (0.0, 0.0));
}

#[test]
fn brightened_face_lights_exactly_its_four_edges() {
    for f in FaceId::ALL {
        let mut cm = CubemapImage::filled(8, 90.0, &[0.25, 0.25, 0.25]).unwrap();
        *cm.face_mut(f) = Image::filled(8, 8, &[0.75, 0.75, 0.75]);
        let r = seam_discontinuity(&cm).unwrap();
        let lit: Vec<_> = r.edges.iter().filter(|e| e.mean > 0.0).collect();
        assert_eq!(lit.len(), 4, "{f}");
        for e in &lit {
            assert!(e.pair.face_a == f || e.pair.face_b == f);
            assert!((e.mean - 0.5).abs() < 1e-12 && (e.max - 0.5).abs() < 1e-12);
        }
        assert!((r.mean - 0.5 * 4.0 / 12.0).abs() < 1e-12);
    }
}

#[test]
fn seams_need_ninety_degree_faces() {
    let cm = CubemapImage::filled(8, 95.0, &[0.0]).unwrap();
    assert!(matches!(seam_discontinuity(&cm), Err(Error::Domain(_))));
    assert!(seam_discontinuity(&cm.cropped(90.0).unwrap()).is_ok());
}

#[test]
fn wraparound_examples() {
    let w = 64;
    let ramp = EquirectImage::new(Image::from_fn(w, 32, 1, |_, j, p| p[0] = j as f64 / (w - 1) as f64)).unwrap();
    assert!((wraparound_error(&ramp) - 1.0).abs() < 1e-12);
    let flat = EquirectImage::new(Image::filled(w, 32, &[0.4])).unwrap();
    assert_eq!(wraparound_error(&flat), 0.0);
    assert!(wraparound_error(&smooth_pano(64)) < 0.01);
}

#[test]
fn divergence_examples() {
    let mut cm = CubemapImage::filled(8, 90.0, &[0.5, 0.5, 0.5]).unwrap();
    assert_eq!(face_color_divergence(&cm), 0.0);
    *cm.face_mut(FaceId::Back) = Image::filled(8, 8, &[0.6, 0.6, 0.6]);
    assert!((face_color_divergence(&cm) - 0.1).abs() < 1e-12);
}

#[test]
fn axis_views_match_cube_faces() {
    let eq = smooth_pano(512);
    let cm = equirect_to_cubemap(&eq, 64, 90.0).unwrap();
    let front = render_perspective(&eq, 0.0, 0.0, 90.0, 64).unwrap();
    assert!(front.rms_diff(cm.face(FaceId::Front)) <= 0.02);
    let right = render_perspective(&eq, FRAC_PI_2, 0.0, 90.0, 64).unwrap();
    assert!(right.rms_diff(cm.face(FaceId::Right)) <= 0.02);
    assert!(render_perspective(&eq, 0.0, 0.0, 180.0, 8).is_err());
}

#[test]
fn sampled_views_cover_the_stated_ranges() {
    let eq = smooth_pano(64);
    let v = sample_perspective_views(&eq, 40, 60.0, 16, 3).unwrap();
    assert_eq!(v.len(), 40);
    assert!(v.iter().all(|p| (-180.0..180.0).contains(&p.azimuth_deg) && (-45.0..=45.0).contains(&p.elevation_deg)));
    assert!(v.iter().all(|p| p.image.width == 16 && p.image.height == 16));
    assert_eq!(v, sample_perspective_views(&eq, 40, 60.0, 16, 3).unwrap());
}

#[test]
fn patch_stats_shape_and_flat_images() {
    let fx = PatchStats;
    assert_eq!(fx.dim(), 160);
    let f = fx.extract(&Image::filled(16, 16, &[0.2, 0.2, 0.2]));
    assert_eq!(f.len(), 160);
    for cell in f.chunks(10) {
        assert!((cell[0] - 0.2).abs() < 1e-12);
        assert!(cell[1..].iter().all(|&v| v.abs() < 1e-12));
    }
    let edge = Image::from_fn(16, 16, 1, |_, j, p| p[0] = if j < 8 { 0.0 } else { 1.0 });
    assert!(fx.extract(&edge).iter().any(|&v| v > 0.0));
}

fn poly(x: &[f64], y: &[f64]) -> f64 {
    (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / x.len() as f64 + 1.0).powi(3)
}

/// Direct double sums over `i != j`.
fn brute_mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (m, n) = (a.len() as f64, b.len() as f64);
    let mut kaa = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            if i != j {
                kaa += poly(&a[i], &a[j]);
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..b.len() {
        for j in 0..b.len() {
            if i != j {
                kbb += poly(&b[i], &b[j]);
            }
        }
    }
    let kab: f64 = a.iter().flat_map(|x| b.iter().map(move |y| poly(x, y))).sum();
    kaa / (m * (m - 1.0)) + kbb / (n * (n - 1.0)) - 2.0 * kab / (m * n)
}

fn random_set(r: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0) + shift).collect()).collect()
}

#[test]
fn mmd_matches_brute_force() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for (m, n) in [(2, 2), (5, 9), (20, 13)] {
        let a = random_set(&mut r, m, 6, 0.0);
        let b = random_set(&mut r, n, 6, 0.3);
        assert!((kid_mmd(&a, &b).unwrap() - brute_mmd(&a, &b)).abs() <= 1e-12);
    }
}

#[test]
fn mmd_two_by_two_closed_form() {
    // 1-d features, k(x, y) = (xy + 1)^3: k(0,.) = 1, k(1,1) = 8,
    // k(1,2) = 27, k(2,2) = 125
    let a = vec![vec![0.0], vec![1.0]];
    let b = vec![vec![0.0], vec![2.0]];
    assert!((kid_mmd(&a, &b).unwrap() - (1.0 + 1.0 - 2.0 * 30.0 / 4.0)).abs() < 1e-12);
    let biased = 11.0 / 4.0 + 128.0 / 4.0 - 2.0 * 30.0 / 4.0;
    assert!((kid_mmd_biased(&a, &b).unwrap() - biased).abs() < 1e-12);
    assert_eq!(kid_mmd_biased(&a, &a).unwrap(), 0.0);
}

#[test]
fn mmd_is_permutation_invariant_and_symmetric() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let a = random_set(&mut r, 12, 4, 0.0);
    let b = random_set(&mut r, 10, 4, 0.5);
    let base = kid_mmd(&a, &b).unwrap();
    let (mut a2, mut b2) = (a.clone(), b.clone());
    a2.shuffle(&mut r);
    b2.shuffle(&mut r);
    assert!((kid_mmd(&a2, &b2).unwrap() - base).abs() <= 1e-12);
    assert!((kid_mmd(&b, &a).unwrap() - base).abs() <= 1e-12);
    assert!(base > 0.0);
}

#[test]
fn mmd_rejects_tiny_or_ragged_sets() {
    let a = vec![vec![0.0, 1.0]];
    let b = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    assert!(matches!(kid_mmd(&a, &b), Err(Error::Domain(_))));
    assert!(kid_mmd(&b, &[vec![0.0], vec![1.0]]).is_err());
}

#[test]
fn beacon_scoring() {
    for seed in 0..4 {
        let scene = Scene::new(seed, PanoramaKind::BeaconRoom);
        let cm = equirect_to_cubemap(&scene.render(128), 32, 95.0).unwrap();
        let s = beacon_score(&cm, &scene).unwrap();
        assert_eq!(s.correct.len(), 5);
        assert!(s.all_correct(), "seed {seed}");
        let Scene::Beacons { wall, .. } = scene else { unreachable!() };
        let bare = CubemapImage::filled(32, 95.0, &wall).unwrap();
        assert!(beacon_score(&bare, &scene).unwrap().correct.iter().all(|&c| !c));
    }
    let sky = Scene::new(0, PanoramaKind::SkyGradient);
    let cm = CubemapImage::filled(8, 90.0, &[0.0, 0.0, 0.0]).unwrap();
    assert!(matches!(beacon_score(&cm, &sky), Err(Error::Domain(_))));
}
