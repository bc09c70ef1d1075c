//! Panorama metrics that need no pretrained network.

use std::f64::consts::PI;

use cubepano_tensor::{Adam, Conv2d, FaceLatentBatch, Graph, GroupNorm, ParamStore, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{half_extent, Direction, FaceId};
use crate::image::Image;
use crate::latent::PixelCodec;
use crate::projection::{equirect_to_cubemap, seam_edge_pairs, CubemapImage, EdgePair, EquirectImage};
use crate::rng::stream;
use crate::synth::{beacon_palette, synth_panorama, PanoramaKind, Scene};

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeStats {
    pub pair: EdgePair,
    pub mean: f64,
    pub max: f64,
}

/// Abs-diff statistics of matched border pixels. `mean` averages the
/// per-edge means; `max` is the largest single difference.
#[derive(Debug, Clone, PartialEq)]
pub struct SeamReport {
    pub edges: Vec<EdgeStats>,
    pub mean: f64,
    pub max: f64,
}

/// Compares the outermost pixel rows/columns of adjacent faces. Faces must
/// be at 90 degrees; crop overlapping cubemaps first.
pub fn seam_discontinuity(cm: &CubemapImage) -> Result<SeamReport> {
    if (cm.fov_deg() - 90.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("seams need 90 degree faces, got {} (crop first)", cm.fov_deg())));
    }
    let n = cm.face_size();
    let ch = cm.channels();
    let edges: Vec<EdgeStats> = seam_edge_pairs()
        .into_iter()
        .map(|pair| {
            let (a, b) = (cm.face(pair.face_a), cm.face(pair.face_b));
            let (mut sum, mut max) = (0.0, 0.0f64);
            for k in 0..n {
                let ((ia, ja), (ib, jb)) = pair.pixels(k, n);
                for (x, y) in a.pixel(ia, ja).iter().zip(b.pixel(ib, jb)) {
                    let d = (x - y).abs();
                    sum += d;
                    max = max.max(d);
                }
            }
            EdgeStats { pair, mean: sum / (n * ch) as f64, max }
        })
        .collect();
    let mean = edges.iter().map(|e| e.mean).sum::<f64>() / edges.len() as f64;
    let max = edges.iter().map(|e| e.max).fold(0.0, f64::max);
    Ok(SeamReport { edges, mean, max })
}

/// Mean abs difference between the first and last pixel columns.
pub fn wraparound_error(eq: &EquirectImage) -> f64 {
    let img = eq.image();
    let (w, h) = (img.width, img.height);
    let mut sum = 0.0;
    for i in 0..h {
        for (a, b) in img.pixel(i, 0).iter().zip(img.pixel(i, w - 1)) {
            sum += (a - b).abs();
        }
    }
    sum / (h * img.channels) as f64
}

/// Largest channel-averaged gap between per-face mean colours.
pub fn face_color_divergence(cm: &CubemapImage) -> f64 {
    let means: Vec<Vec<f64>> = cm.faces().iter().map(Image::mean_color).collect();
    let mut worst = 0.0f64;
    for i in 0..means.len() {
        for j in 0..i {
            let d = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).abs()).sum::<f64>() / means[i].len() as f64;
            worst = worst.max(d);
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveView {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub image: Image,
}

/// Pinhole view looking along (`azimuth`, `elevation`) with no roll.
pub fn render_perspective(eq: &EquirectImage, azimuth: f64, elevation: f64, fov_deg: f64, size: usize) -> Result<Image> {
    let t = half_extent(fov_deg)?;
    if size == 0 {
        return Err(Error::Domain("view size must be positive".into()));
    }
    let (sa, ca, se, ce) = (azimuth.sin(), azimuth.cos(), elevation.sin(), elevation.cos());
    let forward = Direction::raw(ce * sa, se, ce * ca);
    let right = Direction::raw(ca, 0.0, -sa);
    let up = forward.cross(right);
    let s = size as f64;
    let mut px = vec![0.0; eq.channels()];
    Ok(Image::from_fn(size, size, eq.channels(), |i, j, out| {
        let a = t * (2.0 * (j as f64 + 0.5) / s - 1.0);
        let b = t * (1.0 - 2.0 * (i as f64 + 0.5) / s);
        eq.sample_direction((forward + right * a + up * b).normalized(), &mut px);
        out.copy_from_slice(&px);
    }))
}

/// `n` views at uniform azimuth and elevation in [-45, 45] degrees.
pub fn sample_perspective_views(
    eq: &EquirectImage,
    n: usize,
    fov_deg: f64,
    size: usize,
    seed: u64,
) -> Result<Vec<PerspectiveView>> {
    let mut r = stream(seed, "views", &[]);
    (0..n)
        .map(|_| {
            let az = r.random_range(-180.0..180.0);
            let el = r.random_range(-45.0..=45.0);
            let image = render_perspective(eq, f64::to_radians(az), f64::to_radians(el), fov_deg, size)?;
            Ok(PerspectiveView { azimuth_deg: az, elevation_deg: el, image })
        })
        .collect()
}

/// Image to fixed-length feature vector.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, img: &Image) -> Vec<f64>;
}

/// 4x4 grid of luminance cells; per cell the mean, the variance and an
/// 8-bin gradient orientation histogram weighted by magnitude.
#[derive(Debug, Clone, Copy, Default)]
pub struct PatchStats;

const GRID: usize = 4;
const BINS: usize = 8;

impl FeatureExtractor for PatchStats {
    fn name(&self) -> &str {
        "patch_stats"
    }

    fn dim(&self) -> usize {
        GRID * GRID * (2 + BINS)
    }

    fn extract(&self, img: &Image) -> Vec<f64> {
        let (w, h) = (img.width, img.height);
        let lum = |i: usize, j: usize| {
            let p = img.pixel(i, j);
            if p.len() >= 3 {
                0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
            } else {
                p[0]
            }
        };
        let mut out = Vec::with_capacity(self.dim());
        for gi in 0..GRID {
            for gj in 0..GRID {
                let rows = gi * h / GRID..((gi + 1) * h / GRID).max(gi * h / GRID + 1).min(h);
                let cols = gj * w / GRID..((gj + 1) * w / GRID).max(gj * w / GRID + 1).min(w);
                let (mut s, mut s2, mut cnt) = (0.0, 0.0, 0.0);
                let mut hist = [0.0; BINS];
                for i in rows.clone() {
                    for j in cols.clone() {
                        let v = lum(i, j);
                        s += v;
                        s2 += v * v;
                        cnt += 1.0;
                        let gx = lum(i, (j + 1).min(w - 1)) - lum(i, j.saturating_sub(1));
                        let gy = lum((i + 1).min(h - 1), j) - lum(i.saturating_sub(1), j);
                        let mag = gx.hypot(gy);
                        if mag > 0.0 {
                            let ang = gy.atan2(gx) + PI;
                            let bin = ((ang / (2.0 * PI) * BINS as f64) as usize).min(BINS - 1);
                            hist[bin] += mag;
                        }
                    }
                }
                let mean = s / cnt;
                out.push(mean);
                out.push((s2 / cnt - mean * mean).max(0.0));
                out.extend(hist.iter().map(|v| v / cnt));
            }
        }
        out
    }
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d + 1.0).powi(3)
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Domain(format!("MMD needs at least 2 samples per set, got {} and {}", a.len(), b.len())));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Domain("feature vectors must share a positive dimension".into()));
    }
    Ok(d)
}

fn kernel_sums(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64, f64, f64, f64) {
    let (mut kaa, mut kbb, mut kab, mut daa, mut dbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, x) in a.iter().enumerate() {
        daa += poly_kernel(x, x);
        for y in &a[i + 1..] {
            kaa += 2.0 * poly_kernel(x, y);
        }
        for y in b {
            kab += poly_kernel(x, y);
        }
    }
    for (i, x) in b.iter().enumerate() {
        dbb += poly_kernel(x, x);
        for y in &b[i + 1..] {
            kbb += 2.0 * poly_kernel(x, y);
        }
    }
    (kaa, kbb, kab, daa, dbb)
}

/// Unbiased MMD^2 with the cubic polynomial kernel `(x.y / d + 1)^3`.
pub fn kid_mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b)?;
    let (m, n) = (a.len() as f64, b.len() as f64);
    let (kaa, kbb, kab, _, _) = kernel_sums(a, b);
    Ok(kaa / (m * (m - 1.0)) + kbb / (n * (n - 1.0)) - 2.0 * kab / (m * n))
}

/// Biased (V-statistic) MMD^2; zero for identical sets.
pub fn kid_mmd_biased(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b)?;
    let (m, n) = (a.len() as f64, b.len() as f64);
    let (kaa, kbb, kab, daa, dbb) = kernel_sums(a, b);
    Ok((kaa + daa) / (m * m) + (kbb + dbb) / (n * n) - 2.0 * kab / (m * n))
}

/// Per-face result of [`beacon_score`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeaconScore {
    /// Non-Front faces in `FaceId` order.
    pub correct: Vec<bool>,
}

impl BeaconScore {
    pub fn all_correct(&self) -> bool {
        self.correct.iter().all(|&c| c)
    }
}

/// Classifies the centre of every non-Front face as the nearest of the six
/// beacon colours or the scene's wall colour and checks it against `scene`.
pub fn beacon_score(cm: &CubemapImage, scene: &Scene) -> Result<BeaconScore> {
    let Scene::Beacons { wall, .. } = scene else {
        return Err(Error::Domain("beacon scoring needs a beacon scene".into()));
    };
    let cm = if cm.fov_deg() > 90.0 { cm.cropped(90.0)? } else { cm.clone() };
    let n = cm.face_size();
    let lo = n * 3 / 8;
    let hi = (n * 5 / 8).max(lo + 1);
    let mut candidates: Vec<[f64; 3]> = beacon_palette().to_vec();
    candidates.push(*wall);
    let correct = FaceId::ALL[1..]
        .iter()
        .map(|&f| {
            let m = cm.face(f).region_mean(lo..hi, lo..hi);
            let d = |c: &[f64; 3]| c.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = candidates.iter().min_by(|a, b| d(a).total_cmp(&d(b))).expect("candidates");
            Some(*best) == scene.beacon_color(f)
        })
        .collect();
    Ok(BeaconScore { correct })
}

/// Colour divergence of the residual between a trained toy autoencoder's
/// reconstruction and its input, on a held-out sky panorama. A per-face
/// normalization cannot see the brightness of neighbouring faces, so its
/// residual varies from face to face.
pub fn gn_autoencoder_divergence(synchronized: bool, seed: u64) -> Result<f64> {
    const SIZE: usize = 16;
    const WIDTH: usize = 16;
    const STEPS: u64 = 300;
    let codec = PixelCodec::new(1, 3)?;
    let cubemap = |s: u64| equirect_to_cubemap(&synth_panorama(s, PanoramaKind::SkyGradient, 64), SIZE, 90.0);
    let mut store = ParamStore::<f32>::new();
    let mut r = stream(seed, "autoencoder", &[]);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut r) };
    let c1 = Conv2d::new(&mut store, "enc", 3, WIDTH, 3, 1, false, &mut normal)?;
    let n1 = GroupNorm::new(&mut store, "enc.norm", WIDTH, 4, 1e-5, synchronized)?;
    let c2 = Conv2d::new(&mut store, "mid", WIDTH, WIDTH, 3, 1, false, &mut normal)?;
    let n2 = GroupNorm::new(&mut store, "mid.norm", WIDTH, 4, 1e-5, synchronized)?;
    let c3 = Conv2d::new(&mut store, "dec", WIDTH, 3, 1, 1, false, &mut normal)?;
    let forward = |g: &mut Graph<f32>, store: &ParamStore<f32>, x: &FaceLatentBatch<f32>, trainable: bool| {
        let p = store.bind(g, trainable)?;
        let mut h = g.constant(x.to_images())?;
        h = c1.forward(g, &p, h)?;
        h = n1.forward(g, &p, h, 6)?;
        h = g.silu(h)?;
        h = c2.forward(g, &p, h)?;
        h = n2.forward(g, &p, h, 6)?;
        h = g.silu(h)?;
        let out = c3.forward(g, &p, h)?;
        Ok::<_, Error>((p, out))
    };
    let mut opt = Adam::new(&store, 0.9, 0.999, 1e-8);
    for step in 0..STEPS {
        let cms = [cubemap(seed.wrapping_mul(1000) + 2 * step)?, cubemap(seed.wrapping_mul(1000) + 2 * step + 1)?];
        let x = codec.encode::<f32>(&[&cms[0], &cms[1]])?;
        let mut g = Graph::new();
        let (p, out) = forward(&mut g, &store, &x, true)?;
        let loss = g.mse(out, &x.to_images(), &[1.0])?;
        let mut grads = g.backward(loss)?;
        let gl: Vec<Option<Tensor<f32>>> = store.ids().map(|id| grads.take(p.var(id))).collect();
        opt.step(&mut store, &gl, 3e-3)?;
    }
    let held = cubemap(u64::MAX - seed)?;
    let x = codec.encode::<f32>(&[&held])?;
    let mut g = Graph::new();
    let (_, out) = forward(&mut g, &store, &x, false)?;
    let recon = codec.decode(&FaceLatentBatch::from_images(g.value(out).clone())?, 0, 90.0)?;
    let residual: Vec<Image> =
        recon.faces().iter().zip(held.faces()).map(|(a, b)| a.map_with(b, |x, y| x - y)).collect();
    Ok(face_color_divergence(&CubemapImage::new(residual, 90.0)?))
}
