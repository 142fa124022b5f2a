//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Images and painted masks arrive as canvas RGBA bytes. A mask pixel is
//! selected when its alpha is at least 128.

use iharmon_core::dataset::Augmentation;
use iharmon_core::evaluation::{mse, psnr, ssim};
use iharmon_core::imaging::{masked_mean, masked_percentile, to_luminance};
use iharmon_core::{Image, Mask};
use wasm_bindgen::prelude::*;

fn image_from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<Image, String> {
    if rgba.len() != width * height * 4 {
        return Err(format!("expected {} RGBA bytes, got {}", width * height * 4, rgba.len()));
    }
    let data = rgba
        .chunks_exact(4)
        .flat_map(|px| px[..3].iter().map(|v| *v as f32 / 255.0))
        .collect();
    Image::new(height, width, 3, data).map_err(|e| e.to_string())
}

fn mask_from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<Mask, String> {
    if rgba.len() != width * height * 4 {
        return Err(format!("expected {} RGBA bytes, got {}", width * height * 4, rgba.len()));
    }
    Mask::from_fn(height, width, |y, x| rgba[(y * width + x) * 4 + 3] >= 128).map_err(|e| e.to_string())
}

fn image_to_rgba(img: &Image) -> Vec<u8> {
    img.to_u8().chunks_exact(3).flat_map(|px| [px[0], px[1], px[2], 255]).collect()
}

/// Maps a slider value `amount` in `[-1, 1]` to an augmentation. Zero is the
/// identity for every kind except `dodge`, which brightens even with a flat
/// mid-gray overlay.
pub fn augmentation_for(kind: &str, amount: f64, seed: u64) -> Result<Augmentation, String> {
    let t = amount.clamp(-1.0, 1.0);
    let strength = t.abs();
    Ok(match kind {
        "brightness" => Augmentation::BrightnessContrast {
            brightness: 0.3 * t,
            contrast: 1.0,
        },
        "contrast" => Augmentation::BrightnessContrast {
            brightness: 0.0,
            contrast: if t >= 0.0 { 1.0 + 0.6 * t } else { 1.0 + 0.4 * t },
        },
        "gamma" => Augmentation::Gamma {
            gamma: if t >= 0.0 { 1.0 + 1.5 * t } else { 1.0 + 0.6 * t },
        },
        "hue" => Augmentation::ColorJitter {
            hue_shift: 0.1 * t,
            sat_scale: 1.0,
        },
        "saturation" => Augmentation::ColorJitter {
            hue_shift: 0.0,
            sat_scale: 1.0 + 0.5 * t,
        },
        "lut" => Augmentation::Lut3d {
            lattice_size: 17,
            strength,
            seed,
        },
        "soft_light" => Augmentation::LocalSoftLight { strength, seed },
        "dodge" => Augmentation::LocalDodge { strength, seed },
        "grain_merge" => Augmentation::LocalGrainMerge { strength, seed },
        "grain_extract" => Augmentation::LocalGrainExtract { strength, seed },
        other => return Err(format!("unknown augmentation {other:?}")),
    })
}

pub fn augment_rgba(
    rgba: &[u8],
    width: usize,
    height: usize,
    mask_rgba: &[u8],
    kind: &str,
    amount: f64,
    seed: u64,
) -> Result<Vec<u8>, String> {
    let img = image_from_rgba(rgba, width, height)?;
    let mask = mask_from_rgba(mask_rgba, width, height)?;
    let aug = augmentation_for(kind, amount, seed)?;
    let out = aug.apply(&img, &mask).map_err(|e| e.to_string())?;
    Ok(image_to_rgba(&out))
}

/// `[p10, mean, p90, pixels]` of the luminance inside the painted region.
pub fn region_luminance_rgba(rgba: &[u8], width: usize, height: usize, mask_rgba: &[u8]) -> Result<Vec<f64>, String> {
    let luma = to_luminance(&image_from_rgba(rgba, width, height)?);
    let mask = mask_from_rgba(mask_rgba, width, height)?;
    let err = |e: iharmon_core::Error| e.to_string();
    Ok(vec![
        masked_percentile(&luma, &mask, 10.0).map_err(err)?,
        masked_mean(&luma, &mask).map_err(err)?,
        masked_percentile(&luma, &mask, 90.0).map_err(err)?,
        mask.count() as f64,
    ])
}

/// Absolute highlight, mid-tone and shadow gaps between two painted regions,
/// followed by their sum.
pub fn luminance_gap_rgba(
    rgba: &[u8],
    width: usize,
    height: usize,
    mask_a: &[u8],
    mask_b: &[u8],
) -> Result<Vec<f64>, String> {
    let a = region_luminance_rgba(rgba, width, height, mask_a)?;
    let b = region_luminance_rgba(rgba, width, height, mask_b)?;
    let gaps = [(a[2] - b[2]).abs(), (a[1] - b[1]).abs(), (a[0] - b[0]).abs()];
    Ok(vec![gaps[0], gaps[1], gaps[2], gaps.iter().sum()])
}

/// `[mse, psnr, ssim]` on the 8-bit scale.
pub fn compare_rgba(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<Vec<f64>, String> {
    let (a, b) = (image_from_rgba(a, width, height)?, image_from_rgba(b, width, height)?);
    let err = |e: iharmon_core::Error| e.to_string();
    Ok(vec![mse(&a, &b).map_err(err)?, psnr(&a, &b).map_err(err)?, ssim(&a, &b).map_err(err)?])
}

#[wasm_bindgen]
pub fn augment(
    rgba: &[u8],
    width: usize,
    height: usize,
    mask: &[u8],
    kind: &str,
    amount: f64,
    seed: u32,
) -> Result<Vec<u8>, JsError> {
    augment_rgba(rgba, width, height, mask, kind, amount, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn region_luminance(rgba: &[u8], width: usize, height: usize, mask: &[u8]) -> Result<Vec<f64>, JsError> {
    region_luminance_rgba(rgba, width, height, mask).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn luminance_gap(rgba: &[u8], width: usize, height: usize, mask_a: &[u8], mask_b: &[u8]) -> Result<Vec<f64>, JsError> {
    luminance_gap_rgba(rgba, width, height, mask_a, mask_b).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn compare(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<Vec<f64>, JsError> {
    compare_rgba(a, b, width, height).map_err(|e| JsError::new(&e))
}
