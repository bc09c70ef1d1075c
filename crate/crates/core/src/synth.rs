//! Procedural panoramas used as training data and test fixtures.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{direction_to_angles, face_frame, Direction, FaceId, SphereAngles};
use crate::projection::EquirectImage;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanoramaKind {
    SkyGradient,
    CheckerSphere,
    BeaconRoom,
}

impl PanoramaKind {
    pub const ALL: [PanoramaKind; 3] = [PanoramaKind::SkyGradient, PanoramaKind::CheckerSphere, PanoramaKind::BeaconRoom];

    /// Fixed caption for the kind. It carries no per-sample information.
    pub fn caption(self) -> &'static str {
        match self {
            PanoramaKind::SkyGradient => "an open sky above flat ground",
            PanoramaKind::CheckerSphere => "a checkered sphere",
            PanoramaKind::BeaconRoom => "a room with colored beacons",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sky_gradient" => Some(PanoramaKind::SkyGradient),
            "checker_sphere" => Some(PanoramaKind::CheckerSphere),
            "beacon_room" => Some(PanoramaKind::BeaconRoom),
            _ => None,
        }
    }
}

/// Angular radius of a beacon disk.
pub const BEACON_RADIUS_DEG: f64 = 20.0;
/// Angular size of a checker cell; divides 360 and 180 evenly.
pub const CHECKER_CELL_DEG: f64 = 30.0;
const SUN_RADIUS_DEG: f64 = 6.0;

/// Six saturated hues, 60 degrees apart.
pub fn beacon_palette() -> [[f64; 3]; 6] {
    let mut p = [[0.0; 3]; 6];
    for (k, c) in p.iter_mut().enumerate() {
        *c = hsv(k as f64 * 60.0, 0.85, 0.9);
    }
    p
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// A fully parameterized scene; [`Scene::color`] evaluates it along any
/// direction, so faces can be rendered exactly as well as via an equirect.
#[derive(Debug, Clone, PartialEq)]
pub enum Scene {
    Sky { zenith: [f64; 3], horizon: [f64; 3], ground: [f64; 3], sun: Direction },
    Checker { a: [f64; 3], b: [f64; 3], lon_phase: f64 },
    Beacons { wall: [f64; 3], rotation: usize },
}

impl Scene {
    pub fn new(seed: u64, kind: PanoramaKind) -> Scene {
        let mut r = stream(seed, "synth", &[kind as u64]);
        let mut jitter = |base: f64, spread: f64| -> [f64; 3] {
            let g = base + r.random_range(-spread..spread);
            [0, 1, 2].map(|_| (g + r.random_range(-0.05..0.05)).clamp(0.0, 1.0))
        };
        match kind {
            PanoramaKind::SkyGradient => {
                let mut zenith = jitter(0.25, 0.1);
                zenith[2] = (zenith[2] + 0.2).min(1.0);
                let horizon = jitter(0.75, 0.1);
                let ground = jitter(0.3, 0.1);
                let lon = r.random_range(-PI..PI);
                let lat = r.random_range(0.15..1.1);
                let sun = crate::geometry::angles_to_direction(SphereAngles { lon, lat });
                Scene::Sky { zenith, horizon, ground, sun }
            }
            PanoramaKind::CheckerSphere => {
                let a = jitter(0.8, 0.15);
                let b = jitter(0.2, 0.15);
                let lon_phase = r.random_range(0.0..CHECKER_CELL_DEG.to_radians());
                Scene::Checker { a, b, lon_phase }
            }
            PanoramaKind::BeaconRoom => {
                let wall = jitter(0.5, 0.15);
                let rotation = r.random_range(0..6);
                Scene::Beacons { wall, rotation }
            }
        }
    }

    pub fn color(&self, d: Direction) -> [f64; 3] {
        match self {
            Scene::Sky { zenith, horizon, ground, sun } => {
                if d.angle_to(*sun) <= SUN_RADIUS_DEG.to_radians() {
                    return [1.0, 0.95, 0.8];
                }
                let lat = direction_to_angles(d).lat;
                if lat < 0.0 {
                    *ground
                } else {
                    let t = (lat / FRAC_PI_2).sqrt();
                    [0, 1, 2].map(|k| horizon[k] + t * (zenith[k] - horizon[k]))
                }
            }
            Scene::Checker { a, b, lon_phase } => {
                let s = direction_to_angles(d);
                let cell = CHECKER_CELL_DEG.to_radians();
                let i = ((s.lon + PI + lon_phase) / cell).floor() as i64;
                let j = ((s.lat + FRAC_PI_2) / cell).floor() as i64;
                if (i + j).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Scene::Beacons { wall, .. } => {
                for f in FaceId::ALL {
                    if d.angle_to(face_frame(f).forward) <= BEACON_RADIUS_DEG.to_radians() {
                        return self.beacon_color(f).expect("beacon scene");
                    }
                }
                *wall
            }
        }
    }

    /// Beacon color expected at the center of face `f`.
    pub fn beacon_color(&self, f: FaceId) -> Option<[f64; 3]> {
        match self {
            Scene::Beacons { rotation, .. } => Some(beacon_palette()[(f.index() + rotation) % 6]),
            _ => None,
        }
    }

    pub fn render(&self, height: usize) -> EquirectImage {
        EquirectImage::from_fn(height, 3, |a, px| {
            px.copy_from_slice(&self.color(crate::geometry::angles_to_direction(a)));
        })
    }
}

/// Default panorama height for synthetic data.
pub const SYNTH_HEIGHT: usize = 128;

/// Deterministic procedural panorama of the given kind.
pub fn synth_panorama(seed: u64, kind: PanoramaKind, height: usize) -> EquirectImage {
    Scene::new(seed, kind).render(height)
}
