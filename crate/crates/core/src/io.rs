//! PNG and cubemap files.
//!
//! A cubemap on disk is `<stem>_front.png` .. `<stem>_down.png` plus a
//! `<stem>.json` sidecar holding `{fov_deg, face_size, channels}`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FaceId;
use crate::image::Image;
use crate::projection::{CubemapImage, EquirectImage};

/// Reads an 8- or 16-bit PNG. Colour inputs become 3 channels (alpha is
/// dropped), grayscale inputs 1 channel.
pub fn load_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dynimg = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.into(), detail: e.to_string() })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let color = dynimg.color().has_color();
    let sixteen = dynimg.color().bytes_per_pixel() / dynimg.color().channel_count() == 2;
    let data: Vec<f64> = match (color, sixteen) {
        (true, true) => dynimg.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        (true, false) => dynimg.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        (false, true) => dynimg.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        (false, false) => dynimg.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    };
    Image::new(w, h, if color { 3 } else { 1 }, data)
}

/// Loads a panorama, enforcing `width = 2 * height`.
pub fn load_equirect(path: &Path) -> Result<EquirectImage> {
    EquirectImage::new(load_png(path)?)
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG; values are clamped to `[0, 1]`. Images with 1 or 3
/// channels are supported.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let raw: Vec<u8> = img.data.iter().map(|&v| quantize8(v)).collect();
    let dynimg = match img.channels {
        1 => DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw).expect("buffer size")),
        3 => DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).expect("buffer size")),
        c => return Err(Error::Domain(format!("cannot write a {c}-channel PNG"))),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    dynimg
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.into(), detail: e.to_string() })
}

/// The image as it reads back after an 8-bit round trip.
pub fn quantized(img: &Image) -> Image {
    img.map(|v| quantize8(v) as f64 / 255.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubemapSidecar {
    pub fov_deg: f64,
    pub face_size: usize,
    pub channels: usize,
}

pub fn face_path(stem: &Path, face: FaceId) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(format!("_{}.png", face.name()));
    PathBuf::from(s)
}

pub fn sidecar_path(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_cubemap(cm: &CubemapImage, stem: &Path) -> Result<()> {
    for f in FaceId::ALL {
        save_png(cm.face(f), &face_path(stem, f))?;
    }
    let meta = CubemapSidecar { fov_deg: cm.fov_deg(), face_size: cm.face_size(), channels: cm.channels() };
    let p = sidecar_path(stem);
    fs::write(&p, serde_json::to_string_pretty(&meta).expect("sidecar serializes")).map_err(|e| Error::io(&p, e))
}

pub fn load_cubemap(stem: &Path) -> Result<CubemapImage> {
    let p = sidecar_path(stem);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: CubemapSidecar =
        serde_json::from_str(&text).map_err(|e| Error::Image { path: p.clone(), detail: e.to_string() })?;
    let missing: Vec<PathBuf> = FaceId::ALL.iter().map(|&f| face_path(stem, f)).filter(|p| !p.exists()).collect();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::io(
            &missing[0],
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing cube faces: {}", list.join(", "))),
        ));
    }
    let faces = FaceId::ALL.iter().map(|&f| load_png(&face_path(stem, f))).collect::<Result<Vec<_>>>()?;
    for (f, img) in FaceId::ALL.iter().zip(&faces) {
        if img.width != meta.face_size || img.height != meta.face_size || img.channels != meta.channels {
            return Err(Error::Image {
                path: face_path(stem, *f),
                detail: format!(
                    "expected {0}x{0}x{1} from the sidecar, found {2}x{3}x{4}",
                    meta.face_size, meta.channels, img.width, img.height, img.channels
                ),
            });
        }
    }
    CubemapImage::new(faces, meta.fov_deg)
}
