//! Procedural source scenes with instance masks, for desk-scale experiments
//! and tests. Every scene is lit by one global illuminant (exposure and tint),
//! so any instance's appearance carries information about how every other
//! instance should look.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sample::derive_seed;
use super::store::{AnnotatedImage, Annotations};
use crate::error::{Error, Result};
use crate::imaging::{resize, Image, Mask, ResizeMethod};
use crate::io;

pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Illuminant {
    pub exposure: f64,
    pub tint: [f64; 3],
}

impl Illuminant {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            exposure: rng.random_range(0.3..1.0),
            tint: std::array::from_fn(|_| rng.random_range(0.85..1.15)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }
}

fn smooth_field(size: usize, grid: usize, rng: &mut impl Rng) -> Result<Vec<f32>> {
    let coarse = Image::from_fn(grid, grid, 1, |_, _, _| rng.random::<f32>())?;
    Ok(resize(&coarse, size, size, ResizeMethod::Bilinear)?.into_data())
}

/// Renders one `size×size` scene and the visible-region mask of each object.
pub fn generate_scene(size: usize, seed: u64) -> Result<(Image, Vec<Mask>, Illuminant)> {
    if size < 8 {
        return Err(Error::InvalidArgument("toy scenes need at least 8x8 pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let light = Illuminant::random(&mut rng);
    let s = size as f64;

    let bg_color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.9));
    let bg_noise = smooth_field(size, 4, &mut rng)?;
    let n_objects = rng.random_range(3..=5);
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let cy = rng.random_range(0.15..0.85) * s;
        let cx = rng.random_range(0.15..0.85) * s;
        let ry = rng.random_range(0.1..0.25) * s;
        let rx = rng.random_range(0.1..0.25) * s;
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse { cy, cx, ry, rx }
        } else {
            Shape::Rect {
                y0: cy - ry,
                x0: cx - rx,
                y1: cy + ry,
                x1: cx + rx,
            }
        };
        let albedo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.95));
        let freq = rng.random_range(0.15..0.6);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        objects.push((shape, albedo, freq, phase));
    }

    let mut labels = vec![usize::MAX; size * size];
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut albedo = bg_color.map(|c| c * (0.8 + 0.4 * bg_noise[y * size + x] as f64) * (0.9 + 0.1 * yf / s));
            for (k, (shape, obj_albedo, freq, phase)) in objects.iter().enumerate() {
                if shape.contains(yf, xf) {
                    labels[y * size + x] = k;
                    let stripe = 0.9 + 0.1 * (freq * (xf + 0.5 * yf) + phase).sin();
                    albedo = obj_albedo.map(|c| c * stripe);
                }
            }
            for c in 0..3 {
                data.push((albedo[c] * light.exposure * light.tint[c]).clamp(0.0, 1.0) as f32);
            }
        }
    }
    let image = Image::new(size, size, 3, data)?.quantize();
    let masks = (0..n_objects)
        .map(|k| Mask::new(size, size, labels.iter().map(|l| if *l == k { 1.0 } else { 0.0 }).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((image, masks, light))
}

/// Writes `count` scenes plus their instance masks and an annotation file
/// into `dir`.
pub fn write_toy_sources(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Annotations> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut annotations = Annotations::default();
    for i in 0..count {
        let (img, masks, _) = generate_scene(size, derive_seed(seed, i as u64))?;
        let id = format!("scene_{i:04}");
        let file = format!("{id}.png");
        io::write_image(&img, dir.join(&file))?;
        let mut instances = Vec::new();
        for (k, m) in masks.iter().enumerate() {
            let name = format!("{id}_m{k}.png");
            io::write_mask(m, dir.join(&name))?;
            instances.push(name.into());
        }
        annotations.images.push(AnnotatedImage {
            id,
            file: file.into(),
            instances,
        });
    }
    annotations.save(dir.join(ANNOTATIONS_FILE))?;
    Ok(annotations)
}
