//! 8-bit PNG/JPEG reading and writing. Values are scaled by 1/255 on read and
//! written as `round(255 * v)`. Masks are single-channel PNGs, 255 = selected.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

/// `(height, width)` read from the header alone, without decoding pixels.
pub fn probe_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    let reader = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::InvalidArgument(format!("unreadable image header: {e}")))?;
    let (w, h) = reader.into_dimensions()?;
    Ok((h as usize, w as usize))
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let rgb = image::load_from_memory(bytes)?.to_rgb8();
    rgb_to_image(&rgb)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let gray = image::load_from_memory(bytes)?.to_luma8();
    gray_to_mask(&gray)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes)
}

fn rgb_to_image(rgb: &RgbImage) -> Result<Image> {
    let data = rgb.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
    Image::new(rgb.height() as usize, rgb.width() as usize, 3, data)
}

fn gray_to_mask(gray: &GrayImage) -> Result<Mask> {
    let data = gray.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
    Mask::new(gray.height() as usize, gray.width() as usize, data)
}

fn to_dynamic(img: &Image) -> Result<DynamicImage> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    let raw = img.to_u8();
    let dynamic = match img.channels() {
        3 => RgbImage::from_raw(w, h, raw).map(DynamicImage::ImageRgb8),
        _ => GrayImage::from_raw(w, h, raw).map(DynamicImage::ImageLuma8),
    };
    dynamic.ok_or_else(|| Error::ShapeMismatch("pixel buffer does not match dimensions".into()))
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_dynamic(img)?.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    encode_png(&mask.as_image())
}

/// Writes PNG or JPEG depending on the file extension (PNG when unknown).
pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Png);
    let bytes = match format {
        ImageFormat::Jpeg => {
            let mut out = Cursor::new(Vec::new());
            to_dynamic(img)?.write_to(&mut out, ImageFormat::Jpeg)?;
            out.into_inner()
        }
        _ => encode_png(img)?,
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_mask_png(mask)?).map_err(|e| Error::io(path, e))
}
