//! Decoded source images and the shared preprocessing chain:
//! optional subject crop, center crop to square, bicubic resize.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// An RGB image together with the content hash that identifies it in caches
/// and noise seeding.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceImage {
    pixels: RgbImage,
    hash: String,
}

impl SourceImage {
    /// Reads and decodes a file; the hash covers the file bytes.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Image {
            path: Some(path.to_path_buf()),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Image { reason, .. } => Error::Image { path: Some(path.to_path_buf()), reason },
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let pixels = image::load_from_memory(bytes)
            .map_err(|e| Error::Image { path: None, reason: e.to_string() })?
            .to_rgb8();
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::Image { path: None, reason: "empty image".into() });
        }
        Ok(SourceImage { pixels, hash: hex::encode(Sha256::digest(bytes)) })
    }

    /// Wraps already decoded pixels; the hash covers dimensions and pixels.
    pub fn from_rgb(pixels: RgbImage) -> Self {
        let mut h = Sha256::new();
        h.update(b"rgb8");
        h.update(pixels.width().to_le_bytes());
        h.update(pixels.height().to_le_bytes());
        h.update(pixels.as_raw());
        SourceImage { pixels, hash: hex::encode(h.finalize()) }
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }
}

/// Crops to the bounding box of pixels that differ from the border color.
/// Falls back to the full image when nothing stands out.
pub fn crop_subject(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    let mut border = [0f64; 3];
    let mut n = 0f64;
    for (x, y, p) in img.enumerate_pixels() {
        if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
            for c in 0..3 {
                border[c] += p[c] as f64;
            }
            n += 1.0;
        }
    }
    let bg = border.map(|b| b / n);
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for (x, y, p) in img.enumerate_pixels() {
        let diff = (0..3).map(|c| (p[c] as f64 - bg[c]).abs()).fold(0.0, f64::max);
        if diff > 24.0 {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    if x1 < x0 || y1 < y0 || ((x1 - x0 + 1) as u64 * (y1 - y0 + 1) as u64) * 100 < w as u64 * h as u64 {
        return img.clone();
    }
    let margin_x = (x1 - x0 + 1) / 20;
    let margin_y = (y1 - y0 + 1) / 20;
    let x0 = x0.saturating_sub(margin_x);
    let y0 = y0.saturating_sub(margin_y);
    let x1 = (x1 + margin_x).min(w - 1);
    let y1 = (y1 + margin_y).min(h - 1);
    imageops::crop_imm(img, x0, y0, x1 - x0 + 1, y1 - y0 + 1).to_image()
}

pub fn center_crop_square(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    if w == h {
        return img.clone();
    }
    let side = w.min(h);
    imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image()
}

/// Optional subject crop, center crop, then bicubic resize to
/// `resolution × resolution`.
pub fn prepare(image: &SourceImage, resolution: u32, crop: bool) -> RgbImage {
    let cropped = if crop { crop_subject(image.pixels()) } else { image.pixels().clone() };
    let square = center_crop_square(&cropped);
    if square.width() == resolution {
        return square;
    }
    imageops::resize(&square, resolution, resolution, FilterType::CatmullRom)
}

/// Resize so the shorter side is `short_side`, then center crop to
/// `size × size` (the CLIP / DINO processor chain).
pub fn prepare_shortest_side(image: &SourceImage, short_side: u32, size: u32, crop: bool) -> RgbImage {
    let img = if crop { crop_subject(image.pixels()) } else { image.pixels().clone() };
    let (w, h) = img.dimensions();
    let (nw, nh) = if w <= h {
        (short_side, ((h as u64 * short_side as u64) / w as u64).max(1) as u32)
    } else {
        (((w as u64 * short_side as u64) / h as u64).max(1) as u32, short_side)
    };
    let resized = if (nw, nh) == (w, h) { img } else { imageops::resize(&img, nw, nh, FilterType::CatmullRom) };
    let (x0, y0) = (nw.saturating_sub(size) / 2, nh.saturating_sub(size) / 2);
    let cropped = imageops::crop_imm(&resized, x0, y0, size.min(nw), size.min(nh)).to_image();
    if cropped.dimensions() == (size, size) {
        cropped
    } else {
        imageops::resize(&cropped, size, size, FilterType::CatmullRom)
    }
}

/// `[3, H, W]` tensor with `(x / 255 - mean[c]) / std[c]`.
pub fn to_tensor(img: &RgbImage, mean: [f32; 3], std: [f32; 3]) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        let p = img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0;
        (p - mean[c]) / std[c]
    })
}
