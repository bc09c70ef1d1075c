//! Resampling between equirectangular panoramas and cubemaps.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::geometry::{
    angles_to_direction, direction_to_angles, direction_to_face_uv, half_extent, uv_dir, Direction, FaceId,
    SphereAngles,
};
use crate::image::{Image, Wrap};

/// Longitude-latitude panorama with `width = 2 * height`. Row 0 is the
/// north pole, column 0 is longitude `-pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectImage(Image);

impl EquirectImage {
    pub fn new(img: Image) -> Result<Self> {
        if img.width != 2 * img.height {
            return Err(Error::Domain(format!(
                "equirectangular image must be twice as wide as tall, got {}x{}",
                img.width, img.height
            )));
        }
        Ok(EquirectImage(img))
    }

    pub fn from_fn(height: usize, channels: usize, mut f: impl FnMut(SphereAngles, &mut [f64])) -> Self {
        let width = 2 * height;
        EquirectImage(Image::from_fn(width, height, channels, |i, j, px| {
            f(pixel_angles(i, j, width, height), px)
        }))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }

    /// Bilinear lookup along a direction, wrapping in longitude.
    pub fn sample_direction(&self, d: Direction, out: &mut [f64]) {
        let (x, y) = angles_to_xy(direction_to_angles(d), self.width(), self.height());
        self.0.sample(x, y, Wrap::WrapX, out);
    }
}

/// Angles at the center of equirect pixel `(i, j)`.
pub fn pixel_angles(i: usize, j: usize, width: usize, height: usize) -> SphereAngles {
    SphereAngles {
        lon: (j as f64 + 0.5) / width as f64 * 2.0 * PI - PI,
        lat: FRAC_PI_2 - (i as f64 + 0.5) / height as f64 * PI,
    }
}

/// Continuous equirect coordinates of a sphere point.
pub fn angles_to_xy(a: SphereAngles, width: usize, height: usize) -> (f64, f64) {
    ((a.lon + PI) / (2.0 * PI) * width as f64, (FRAC_PI_2 - a.lat) / PI * height as f64)
}

/// Six square faces in [`FaceId`] order sharing size, channels and FoV.
#[derive(Debug, Clone, PartialEq)]
pub struct CubemapImage {
    faces: Vec<Image>,
    fov_deg: f64,
}

impl CubemapImage {
    pub fn new(faces: Vec<Image>, fov_deg: f64) -> Result<Self> {
        half_extent(fov_deg)?;
        if faces.len() != 6 {
            return Err(Error::Domain(format!("a cubemap has 6 faces, got {}", faces.len())));
        }
        let f0 = &faces[0];
        if f0.width != f0.height {
            return Err(Error::Domain(format!("cube faces must be square, got {}x{}", f0.width, f0.height)));
        }
        if let Some(i) = faces.iter().position(|f| !f.same_shape(f0)) {
            return Err(Error::Domain(format!("face {} differs in shape from face front", FaceId::ALL[i])));
        }
        Ok(CubemapImage { faces, fov_deg })
    }

    pub fn filled(size: usize, fov_deg: f64, color: &[f64]) -> Result<Self> {
        CubemapImage::new(vec![Image::filled(size, size, color); 6], fov_deg)
    }

    pub fn face(&self, f: FaceId) -> &Image {
        &self.faces[f.index()]
    }

    pub fn face_mut(&mut self, f: FaceId) -> &mut Image {
        &mut self.faces[f.index()]
    }

    pub fn faces(&self) -> &[Image] {
        &self.faces
    }

    pub fn into_faces(self) -> Vec<Image> {
        self.faces
    }

    pub fn fov_deg(&self) -> f64 {
        self.fov_deg
    }

    pub fn face_size(&self) -> usize {
        self.faces[0].width
    }

    pub fn channels(&self) -> usize {
        self.faces[0].channels
    }

    /// Crops every face to `fov_to` at the same pixel size.
    pub fn cropped(&self, fov_to: f64) -> Result<CubemapImage> {
        let s = self.face_size();
        let faces = self.faces.iter().map(|f| crop_overlap(f, self.fov_deg, fov_to, s)).collect::<Result<_>>()?;
        CubemapImage::new(faces, fov_to)
    }
}

/// Bilinear sample with the given boundary handling, returned as a vector.
pub fn bilinear_sample(img: &Image, x: f64, y: f64, wrap: Wrap) -> Vec<f64> {
    let mut out = vec![0.0; img.channels];
    img.sample(x, y, wrap, &mut out);
    out
}

/// Perspective projection of the panorama onto six faces.
pub fn equirect_to_cubemap(eq: &EquirectImage, face_size: usize, fov_deg: f64) -> Result<CubemapImage> {
    if face_size < 2 {
        return Err(Error::Domain(format!("face size {face_size} below 2")));
    }
    let t = half_extent(fov_deg)?;
    let s = face_size as f64;
    let faces = FaceId::ALL
        .iter()
        .map(|&f| {
            Image::from_fn(face_size, face_size, eq.channels(), |i, j, px| {
                let d = uv_dir(f, (j as f64 + 0.5) / s, (i as f64 + 0.5) / s, t);
                eq.sample_direction(d, px);
            })
        })
        .collect();
    CubemapImage::new(faces, fov_deg)
}

/// `tan(fov_to / 2) / tan(fov_from / 2)`: the half-extent of the central
/// `fov_to` view in units of the `fov_from` face.
pub fn crop_ratio(fov_from: f64, fov_to: f64) -> Result<f64> {
    let (a, b) = (half_extent(fov_from)?, half_extent(fov_to)?);
    if fov_to > fov_from {
        return Err(Error::Domain(format!("cannot crop a {fov_from} degree face to {fov_to} degrees")));
    }
    Ok(b / a)
}

/// Continuous source coordinate on an `in_size` face of output pixel index
/// `k` of an `out_size` crop with ratio `r`. Applies to rows and columns.
pub fn crop_source_coord(k: usize, out_size: usize, in_size: usize, r: f64) -> f64 {
    let t = 2.0 * (k as f64 + 0.5) / out_size as f64 - 1.0;
    in_size as f64 / 2.0 * (1.0 + r * t)
}

/// Resamples the central `fov_to` region of a `fov_from` face to
/// `out_size x out_size`. Equal FoVs are allowed and resample the whole face.
pub fn crop_overlap(face: &Image, fov_from: f64, fov_to: f64, out_size: usize) -> Result<Image> {
    let r = crop_ratio(fov_from, fov_to)?;
    if out_size == 0 {
        return Err(Error::Domain("crop output size must be positive".into()));
    }
    let n = face.width;
    let xs: Vec<f64> = (0..out_size).map(|k| crop_source_coord(k, out_size, n, r)).collect();
    Ok(Image::from_fn(out_size, out_size, face.channels, |i, j, px| {
        face.sample(xs[j], xs[i], Wrap::Clamp, px);
    }))
}

/// Assembles a panorama of height `out_height`; faces wider than 90 degrees
/// are cropped to their central 90 degrees first.
pub fn cubemap_to_equirect(cm: &CubemapImage, out_height: usize) -> Result<EquirectImage> {
    if out_height == 0 {
        return Err(Error::Domain("output height must be positive".into()));
    }
    let cropped;
    let cm = if cm.fov_deg() > 90.0 {
        cropped = cm.cropped(90.0)?;
        &cropped
    } else if cm.fov_deg() < 90.0 {
        return Err(Error::Domain(format!("a {} degree cubemap does not cover the sphere", cm.fov_deg())));
    } else {
        cm
    };
    let s = cm.face_size() as f64;
    Ok(EquirectImage::from_fn(out_height, cm.channels(), |a, px| {
        let (f, u, v) = direction_to_face_uv(angles_to_direction(a));
        cm.face(f).sample(u * s, v * s, Wrap::Clamp, px);
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Edge {
    Top,
    Right,
    Bottom,
    Left,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::Top, Edge::Right, Edge::Bottom, Edge::Left];

    /// Continuous `(u, v)` of the point at parameter `t` along the edge,
    /// running left to right on horizontal edges and top to bottom on
    /// vertical ones.
    pub fn point(self, t: f64) -> (f64, f64) {
        match self {
            Edge::Top => (t, 0.0),
            Edge::Bottom => (t, 1.0),
            Edge::Left => (0.0, t),
            Edge::Right => (1.0, t),
        }
    }

    /// `(row, col)` of border pixel `k` on a `size x size` face.
    pub fn pixel(self, k: usize, size: usize) -> (usize, usize) {
        match self {
            Edge::Top => (0, k),
            Edge::Bottom => (size - 1, k),
            Edge::Left => (k, 0),
            Edge::Right => (k, size - 1),
        }
    }

    fn param(self, u: f64, v: f64) -> f64 {
        match self {
            Edge::Top | Edge::Bottom => u,
            Edge::Left | Edge::Right => v,
        }
    }

    fn nearest(u: f64, v: f64) -> Edge {
        let cands = [(v, Edge::Top), (1.0 - u, Edge::Right), (1.0 - v, Edge::Bottom), (u, Edge::Left)];
        cands.into_iter().min_by(|a, b| a.0.total_cmp(&b.0)).map(|c| c.1).unwrap()
    }
}

/// Two face borders that meet on the cube. With `reversed`, border pixel `k`
/// of `a` meets border pixel `size - 1 - k` of `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgePair {
    pub face_a: FaceId,
    pub edge_a: Edge,
    pub face_b: FaceId,
    pub edge_b: Edge,
    pub reversed: bool,
}

impl EdgePair {
    /// Pixel coordinates of the `k`-th matched border pair.
    pub fn pixels(&self, k: usize, size: usize) -> ((usize, usize), (usize, usize)) {
        let kb = if self.reversed { size - 1 - k } else { k };
        (self.edge_a.pixel(k, size), self.edge_b.pixel(kb, size))
    }
}

/// The 12 cube edges, derived from the face frames: each face border is
/// followed just past its midpoint to find the neighbouring face.
pub fn seam_edge_pairs() -> Vec<EdgePair> {
    const STEP: f64 = 1e-3;
    let tan45 = 1.0;
    let mut pairs = Vec::with_capacity(12);
    for fa in FaceId::ALL {
        for ea in Edge::ALL {
            let (u, v) = ea.point(0.5);
            let (du, dv) = match ea {
                Edge::Top => (0.0, -STEP),
                Edge::Bottom => (0.0, STEP),
                Edge::Left => (-STEP, 0.0),
                Edge::Right => (STEP, 0.0),
            };
            let (fb, ub, vb) = direction_to_face_uv(uv_dir(fa, u + du, v + dv, tan45));
            if fb <= fa {
                continue;
            }
            let eb = Edge::nearest(ub, vb);
            let (pu, pv) = ea.point(0.1);
            let (_, qu, qv) = direction_to_face_uv(uv_dir(fa, pu + du, pv + dv, tan45));
            let reversed = eb.param(qu, qv) > 0.5;
            pairs.push(EdgePair { face_a: fa, edge_a: ea, face_b: fb, edge_b: eb, reversed });
        }
    }
    pairs
}
