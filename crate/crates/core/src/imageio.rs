//! 8-bit PNG input/output.
//!
//! Decoding maps each byte `v` to `v / 255`. Alpha is flattened over white.
//! Encoding rounds half-up to the nearest byte.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};
use thiserror::Error;

use crate::colorlab::RgbImage;

#[derive(Debug, Error)]
pub enum PngError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: image::ImageError },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: image::ImageError },
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f64 {
    f64::from(b) / 255.0
}

/// Rounds every channel to the nearest representable 8-bit value.
pub fn quantize_image(img: &RgbImage) -> RgbImage {
    RgbImage::from_vec_unchecked(
        img.height(),
        img.width(),
        img.data().iter().map(|&v| dequantize(quantize(v))).collect(),
    )
}

pub fn to_bytes(img: &RgbImage) -> Vec<u8> {
    img.data().iter().map(|&v| quantize(v)).collect()
}

pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> RgbImage {
    RgbImage::from_vec_unchecked(height, width, bytes.iter().map(|&b| dequantize(b)).collect())
}

pub fn decode_dynamic(img: DynamicImage) -> RgbImage {
    let rgba = img.to_rgba8();
    let (w, h) = rgba.dimensions();
    let mut data = Vec::with_capacity(w as usize * h as usize * 3);
    for px in rgba.pixels() {
        let [r, g, b, a] = px.0;
        if a == 255 {
            data.extend([r, g, b].map(dequantize));
        } else {
            let alpha = f64::from(a) / 255.0;
            data.extend([r, g, b].map(|c| dequantize(c) * alpha + (1.0 - alpha)));
        }
    }
    RgbImage::from_vec_unchecked(h as usize, w as usize, data)
}

pub fn read_png(path: &Path) -> Result<RgbImage, PngError> {
    let img = image::open(path).map_err(|source| PngError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(decode_dynamic(img))
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<(), PngError> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, to_bytes(img))
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|source| PngError::Write {
            path: path.to_path_buf(),
            source,
        })
}
