//! Cube-face frames, sphere directions and equirectangular angles.
//!
//! Axes: +Z is the Front view direction, +X points right of it, +Y up.
//! Longitude is `atan2(x, z)` and grows to the right; latitude grows upward.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3-vector. [`Direction::new`] normalizes, so directions built through it
/// are unit length.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Direction {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Direction {
    /// Normalized direction. The zero vector is returned unchanged.
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Direction { x, y, z }.normalized()
    }

    pub const fn raw(x: f64, y: f64, z: f64) -> Self {
        Direction { x, y, z }
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Direction::raw(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            self
        } else {
            Direction::raw(self.x / n, self.y / n, self.z / n)
        }
    }

    /// Angle in radians between two unit directions.
    pub fn angle_to(self, o: Self) -> f64 {
        // atan2 form stays accurate for nearly parallel vectors
        self.cross(o).norm().atan2(self.dot(o))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Direction {
    type Output = Direction;
    fn add(self, o: Self) -> Self {
        Direction::raw(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Direction {
    type Output = Direction;
    fn sub(self, o: Self) -> Self {
        Direction::raw(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Direction {
    type Output = Direction;
    fn mul(self, s: f64) -> Self {
        Direction::raw(self.x * s, self.y * s, self.z * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceId {
    Front = 0,
    Right = 1,
    Back = 2,
    Left = 3,
    Up = 4,
    Down = 5,
}

impl FaceId {
    pub const ALL: [FaceId; 6] = [FaceId::Front, FaceId::Right, FaceId::Back, FaceId::Left, FaceId::Up, FaceId::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<FaceId> {
        FaceId::ALL.get(i).copied()
    }

    /// Lowercase name used in file suffixes.
    pub fn name(self) -> &'static str {
        match self {
            FaceId::Front => "front",
            FaceId::Right => "right",
            FaceId::Back => "back",
            FaceId::Left => "left",
            FaceId::Up => "up",
            FaceId::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<FaceId> {
        FaceId::ALL.into_iter().find(|f| f.name() == s.to_ascii_lowercase())
    }
}

impl fmt::Display for FaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Orthonormal right-handed basis: `right x up = forward`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceFrame {
    pub right: Direction,
    pub up: Direction,
    pub forward: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereAngles {
    /// Radians in `[-pi, pi]`.
    pub lon: f64,
    /// Radians in `[-pi/2, pi/2]`.
    pub lat: f64,
}

/// Per-pixel `(u, v)` encoding, row-major, two values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct UVMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl UVMap {
    pub fn get(&self, i: usize, j: usize) -> (f64, f64) {
        let o = 2 * (i * self.width + j);
        (self.data[o], self.data[o + 1])
    }
}

const fn d(x: f64, y: f64, z: f64) -> Direction {
    Direction::raw(x, y, z)
}

/// The fixed cube convention. The four side faces share `up = +Y`; Up and
/// Down take the Front view direction (+Z) as their up vector.
pub fn face_frame(face: FaceId) -> FaceFrame {
    let (right, up, forward) = match face {
        FaceId::Front => (d(1.0, 0.0, 0.0), d(0.0, 1.0, 0.0), d(0.0, 0.0, 1.0)),
        FaceId::Right => (d(0.0, 0.0, -1.0), d(0.0, 1.0, 0.0), d(1.0, 0.0, 0.0)),
        FaceId::Back => (d(-1.0, 0.0, 0.0), d(0.0, 1.0, 0.0), d(0.0, 0.0, -1.0)),
        FaceId::Left => (d(0.0, 0.0, 1.0), d(0.0, 1.0, 0.0), d(-1.0, 0.0, 0.0)),
        FaceId::Up => (d(-1.0, 0.0, 0.0), d(0.0, 0.0, 1.0), d(0.0, 1.0, 0.0)),
        FaceId::Down => (d(1.0, 0.0, 0.0), d(0.0, 0.0, 1.0), d(0.0, -1.0, 0.0)),
    };
    FaceFrame { right, up, forward }
}

/// `tan(fov / 2)` after checking `0 < fov < 180`.
pub fn half_extent(fov_deg: f64) -> Result<f64> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::Domain(format!("field of view {fov_deg} outside (0, 180) degrees")));
    }
    Ok((fov_deg.to_radians() / 2.0).tan())
}

/// Direction through continuous face coordinates `u = x / size`,
/// `v = y / size`, with `v` measured downward from the top edge.
pub fn face_uv_to_direction(face: FaceId, u: f64, v: f64, fov_deg: f64) -> Result<Direction> {
    let t = half_extent(fov_deg)?;
    Ok(uv_dir(face, u, v, t))
}

#[inline]
pub(crate) fn uv_dir(face: FaceId, u: f64, v: f64, tan_half: f64) -> Direction {
    let f = face_frame(face);
    let a = tan_half * (2.0 * u - 1.0);
    let b = tan_half * (1.0 - 2.0 * v);
    (f.forward + f.right * a + f.up * b).normalized()
}

/// Direction through the center of pixel `(i, j)` of a `size x size` face.
pub fn pixel_to_direction(face: FaceId, i: usize, j: usize, size: usize, fov_deg: f64) -> Result<Direction> {
    if size == 0 {
        return Err(Error::Domain("face size must be at least 1".into()));
    }
    let s = size as f64;
    face_uv_to_direction(face, (j as f64 + 0.5) / s, (i as f64 + 0.5) / s, fov_deg)
}

pub fn direction_to_angles(d: Direction) -> SphereAngles {
    SphereAngles { lon: d.x.atan2(d.z), lat: d.y.atan2(d.x.hypot(d.z)) }
}

pub fn angles_to_direction(a: SphereAngles) -> Direction {
    let (sl, cl) = a.lat.sin_cos();
    let (so, co) = a.lon.sin_cos();
    Direction::raw(cl * so, sl, cl * co)
}

/// The face whose view direction best matches `d` (ties go to the lower
/// face index) and the gnomonic `(u, v)` on its 90 degree face.
pub fn direction_to_face_uv(d: Direction) -> (FaceId, f64, f64) {
    let mut best = FaceId::Front;
    let mut best_dot = f64::NEG_INFINITY;
    for f in FaceId::ALL {
        let dot = d.dot(face_frame(f).forward);
        if dot > best_dot {
            best = f;
            best_dot = dot;
        }
    }
    let fr = face_frame(best);
    let a = d.dot(fr.right) / best_dot;
    let b = d.dot(fr.up) / best_dot;
    (best, (a + 1.0) / 2.0, (1.0 - b) / 2.0)
}

/// Equirectangular `(u, v)` of a direction: longitude and latitude mapped
/// linearly onto `[0, 1]`.
pub fn angles_to_unit(a: SphereAngles) -> (f64, f64) {
    ((a.lon + PI) / (2.0 * PI), (a.lat + FRAC_PI_2) / PI)
}

/// Global sphere-angle encoding of every pixel of one face.
pub fn positional_encoding(face: FaceId, h: usize, w: usize, fov_deg: f64) -> Result<UVMap> {
    if h == 0 || w == 0 {
        return Err(Error::Domain("positional encoding needs a non-empty grid".into()));
    }
    let t = half_extent(fov_deg)?;
    let mut data = Vec::with_capacity(2 * h * w);
    for i in 0..h {
        for j in 0..w {
            let u = (j as f64 + 0.5) / w as f64;
            let v = (i as f64 + 0.5) / h as f64;
            let (pu, pv) = angles_to_unit(direction_to_angles(uv_dir(face, u, v, t)));
            data.push(pu);
            data.push(pv);
        }
    }
    Ok(UVMap { height: h, width: w, data })
}
