//! 8-bit PNG reading and writing for images and masks.

use crate::error::Result;
use crate::Image;
use image::{GrayImage, RgbImage};
use std::path::Path;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `img` as 8-bit RGB; values are clamped to `[0, 1]` and rounded.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Reads any PNG as RGB in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.into_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Image::from_data(w as usize, h as usize, data)
}

/// Writes a binary mask as black/white grayscale.
pub fn save_mask(mask: &[bool], width: usize, height: usize, path: &Path) -> Result<()> {
    let bytes = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(width as u32, height as u32, bytes).expect("mask matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Reads a mask; pixels brighter than mid-gray are foreground.
pub fn load_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let gray = image::open(path)?.into_luma8();
    let (w, h) = gray.dimensions();
    Ok((gray.into_raw().into_iter().map(|b| b >= 128).collect(), w as usize, h as usize))
}
