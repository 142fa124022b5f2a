//! Appearance augmentations applied to the foreground of a source image to
//! fabricate a composite. Every operation touches only pixels the mask selects
//! and is an exact no-op at its identity parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{check_aligned, resize, Image, Mask, ResizeMethod};

pub const GAMMA_RANGE: (f64, f64) = (0.4, 2.5);
pub const BRIGHTNESS_RANGE: (f64, f64) = (-0.3, 0.3);
pub const CONTRAST_RANGE: (f64, f64) = (0.6, 1.6);
pub const HUE_SHIFT_RANGE: (f64, f64) = (-0.1, 0.1);
pub const SATURATION_RANGE: (f64, f64) = (0.5, 1.5);
pub const LIGHTING_STRENGTH_RANGE: (f64, f64) = (0.2, 1.0);
pub const LUT_STRENGTH_RANGE: (f64, f64) = (0.2, 1.0);
pub const LUT_LATTICE_SIZE: usize = 9;

const DODGE_EPS: f64 = 1e-6;

fn in_range(name: &str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name}={v} outside [{lo}, {hi}]")))
    }
}

/// Applies `f` to every channel of every selected pixel, computing in `f64`.
fn map_selected(img: &Image, mask: &Mask, mut f: impl FnMut(usize, &mut [f64; 3])) -> Result<Image> {
    check_aligned(img.dims(), mask.dims())?;
    if img.channels() != 3 {
        return Err(Error::InvalidArgument("augmentations expect RGB images".into()));
    }
    let mut out = img.clone();
    out.map_pixels(|i, px| {
        if !mask.is_selected(i) {
            return;
        }
        let mut rgb = [px[0] as f64, px[1] as f64, px[2] as f64];
        f(i, &mut rgb);
        for (dst, v) in px.iter_mut().zip(rgb) {
            *dst = v.clamp(0.0, 1.0) as f32;
        }
    });
    Ok(out)
}

pub fn apply_gamma(img: &Image, mask: &Mask, gamma: f64) -> Result<Image> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    map_selected(img, mask, |_, rgb| rgb.iter_mut().for_each(|v| *v = v.powf(gamma)))
}

/// `c * (v - 0.5) + 0.5 + b`, evaluated as `c * v + (b + 0.5 * (1 - c))` so that
/// `b = 0, c = 1` reproduces `v` bit for bit.
pub fn apply_brightness_contrast(img: &Image, mask: &Mask, brightness: f64, contrast: f64) -> Result<Image> {
    let offset = brightness + 0.5 * (1.0 - contrast);
    map_selected(img, mask, |_, rgb| {
        rgb.iter_mut().for_each(|v| *v = contrast * *v + offset)
    })
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    if s == 0.0 {
        return [v, v, v];
    }
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn apply_color_jitter(img: &Image, mask: &Mask, hue_shift: f64, sat_scale: f64) -> Result<Image> {
    if !(sat_scale.is_finite() && sat_scale >= 0.0 && hue_shift.is_finite()) {
        return Err(Error::InvalidArgument("color jitter parameters must be finite".into()));
    }
    if hue_shift == 0.0 && sat_scale == 1.0 {
        check_aligned(img.dims(), mask.dims())?;
        return Ok(img.clone());
    }
    map_selected(img, mask, |_, rgb| {
        let [h, s, v] = rgb_to_hsv(*rgb);
        if s == 0.0 {
            return;
        }
        *rgb = hsv_to_rgb([(h + hue_shift).rem_euclid(1.0), (s * sat_scale).clamp(0.0, 1.0), v]);
    })
}

/// A regular `s×s×s` lattice of RGB outputs over the unit cube, indexed
/// `[r][g][b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut3d {
    size: usize,
    table: Vec<[f64; 3]>,
}

impl Lut3d {
    pub fn new(size: usize, table: Vec<[f64; 3]>) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!("lattice size must be >= 2, got {size}")));
        }
        if table.len() != size * size * size {
            return Err(Error::InvalidArgument(format!(
                "lattice of size {size} needs {} entries, got {}",
                size * size * size,
                table.len()
            )));
        }
        if table.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("lattice entries must be finite".into()));
        }
        Ok(Self { size, table })
    }

    pub fn from_fn(size: usize, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Self> {
        let step = 1.0 / (size.max(2) - 1) as f64;
        let mut table = Vec::with_capacity(size * size * size);
        for r in 0..size {
            for g in 0..size {
                for b in 0..size {
                    table.push(f([r as f64 * step, g as f64 * step, b as f64 * step]));
                }
            }
        }
        Self::new(size, table)
    }

    pub fn identity(size: usize) -> Result<Self> {
        Self::from_fn(size, |rgb| rgb)
    }

    /// Random smooth color grade: a perturbed channel-mixing matrix after
    /// per-channel power curves, sampled on the lattice.
    pub fn random(size: usize, strength: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mix = [[0.0f64; 3]; 3];
        for (i, row) in mix.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let base = if i == j { 1.0 } else { 0.0 };
                *v = base + strength * rng.random_range(-0.3..0.3);
            }
        }
        let curves: [f64; 3] = std::array::from_fn(|_| (strength * rng.random_range(-0.5..0.5f64)).exp());
        Self::from_fn(size, |rgb| {
            let bent: [f64; 3] = std::array::from_fn(|c| rgb[c].powf(curves[c]));
            std::array::from_fn(|i| (0..3).map(|j| mix[i][j] * bent[j]).sum::<f64>().clamp(0.0, 1.0))
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn at(&self, r: usize, g: usize, b: usize) -> [f64; 3] {
        self.table[(r * self.size + g) * self.size + b]
    }

    /// Trilinear lookup.
    pub fn lookup(&self, rgb: [f64; 3]) -> [f64; 3] {
        let n = (self.size - 1) as f64;
        let mut lo = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for c in 0..3 {
            let p = rgb[c].clamp(0.0, 1.0) * n;
            let i = (p.floor() as usize).min(self.size - 2);
            lo[c] = i;
            frac[c] = p - i as f64;
        }
        let mut out = [0.0; 3];
        for dr in 0..2 {
            let wr = if dr == 0 { 1.0 - frac[0] } else { frac[0] };
            for dg in 0..2 {
                let wg = if dg == 0 { 1.0 - frac[1] } else { frac[1] };
                for db in 0..2 {
                    let wb = if db == 0 { 1.0 - frac[2] } else { frac[2] };
                    let v = self.at(lo[0] + dr, lo[1] + dg, lo[2] + db);
                    let w = wr * wg * wb;
                    for c in 0..3 {
                        out[c] += w * v[c];
                    }
                }
            }
        }
        out
    }
}

pub fn apply_lut3d(img: &Image, mask: &Mask, lut: &Lut3d) -> Result<Image> {
    map_selected(img, mask, |_, rgb| *rgb = lut.lookup(*rgb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    SoftLight,
    Dodge,
    GrainMerge,
    GrainExtract,
}

impl BlendMode {
    pub const ALL: [BlendMode; 4] = [
        BlendMode::SoftLight,
        BlendMode::Dodge,
        BlendMode::GrainMerge,
        BlendMode::GrainExtract,
    ];

    /// Blends base `a` with overlay `b`, unclamped.
    pub fn blend(self, a: f64, b: f64) -> f64 {
        match self {
            BlendMode::SoftLight if b <= 0.5 => 2.0 * a * b + a * a * (1.0 - 2.0 * b),
            BlendMode::SoftLight => 2.0 * a * (1.0 - b) + a.sqrt() * (2.0 * b - 1.0),
            BlendMode::Dodge => a / (1.0 - b + DODGE_EPS),
            BlendMode::GrainMerge => a + b - 0.5,
            BlendMode::GrainExtract => a - b + 0.5,
        }
    }
}

/// A gray overlay plane and the soft sub-region of the foreground it affects.
#[derive(Debug, Clone, PartialEq)]
pub struct LightingOverlay {
    pub overlay: Mask,
    pub weight: Mask,
}

impl LightingOverlay {
    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Ok(Self {
            overlay: Mask::filled(height, width, value)?,
            weight: Mask::filled(height, width, 1.0)?,
        })
    }

    /// Low-frequency noise overlay centered on 0.5 with amplitude proportional
    /// to `strength`, confined to a random smooth blob inside `fg_mask`.
    pub fn random(fg_mask: &Mask, strength: f64, seed: u64) -> Result<Self> {
        let (h, w) = fg_mask.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amp = 0.5 * strength;
        let grid = 4;
        let coarse = Image::from_fn(grid, grid, 1, |_, _, _| (0.5 + amp * rng.random_range(-1.0..1.0f64)) as f32)?;
        let overlay = Mask::from_image(&resize(&coarse, h, w, ResizeMethod::Bilinear)?)?;

        let blob = Image::from_fn(3, 3, 1, |_, _, _| rng.random::<f32>())?;
        let blob = resize(&blob, h, w, ResizeMethod::Bilinear)?;
        let threshold: f32 = rng.random_range(0.2..0.5);
        let data = blob
            .data()
            .iter()
            .zip(fg_mask.data())
            .map(|(v, m)| {
                if *m > 0.5 {
                    smoothstep(threshold - 0.15, threshold + 0.15, *v)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            overlay,
            weight: Mask::new(h, w, data)?,
        })
    }
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

pub fn apply_overlay(img: &Image, mask: &Mask, mode: BlendMode, overlay: &LightingOverlay) -> Result<Image> {
    check_aligned(img.dims(), overlay.overlay.dims())?;
    check_aligned(img.dims(), overlay.weight.dims())?;
    let o = overlay.overlay.data();
    let wt = overlay.weight.data();
    map_selected(img, mask, |i, rgb| {
        let b = o[i] as f64;
        let s = wt[i] as f64;
        for a in rgb.iter_mut() {
            let blended = mode.blend(*a, b).clamp(0.0, 1.0);
            *a += s * (blended - *a);
        }
    })
}

pub fn apply_local_lighting(img: &Image, fg_mask: &Mask, mode: BlendMode, strength: f64, seed: u64) -> Result<Image> {
    if fg_mask.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let overlay = LightingOverlay::random(fg_mask, strength, seed)?;
    apply_overlay(img, fg_mask, mode, &overlay)
}

/// One entry of the augmentation bank, with the parameters it was drawn with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Augmentation {
    BrightnessContrast { brightness: f64, contrast: f64 },
    ColorJitter { hue_shift: f64, sat_scale: f64 },
    Gamma { gamma: f64 },
    Lut3d { lattice_size: usize, strength: f64, seed: u64 },
    LocalSoftLight { strength: f64, seed: u64 },
    LocalDodge { strength: f64, seed: u64 },
    LocalGrainMerge { strength: f64, seed: u64 },
    LocalGrainExtract { strength: f64, seed: u64 },
}

impl Augmentation {
    pub const KINDS: usize = 8;

    /// Draws one augmentation uniformly over the bank, parameters uniform in
    /// their ranges.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let u = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        match rng.random_range(0..Self::KINDS) {
            0 => Augmentation::BrightnessContrast {
                brightness: u(rng, BRIGHTNESS_RANGE),
                contrast: u(rng, CONTRAST_RANGE),
            },
            1 => Augmentation::ColorJitter {
                hue_shift: u(rng, HUE_SHIFT_RANGE),
                sat_scale: u(rng, SATURATION_RANGE),
            },
            2 => Augmentation::Gamma {
                gamma: u(rng, GAMMA_RANGE),
            },
            3 => Augmentation::Lut3d {
                lattice_size: LUT_LATTICE_SIZE,
                strength: u(rng, LUT_STRENGTH_RANGE),
                seed: rng.random(),
            },
            k => {
                let strength = u(rng, LIGHTING_STRENGTH_RANGE);
                let seed = rng.random();
                match k {
                    4 => Augmentation::LocalSoftLight { strength, seed },
                    5 => Augmentation::LocalDodge { strength, seed },
                    6 => Augmentation::LocalGrainMerge { strength, seed },
                    _ => Augmentation::LocalGrainExtract { strength, seed },
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::BrightnessContrast { .. } => "brightness_contrast",
            Augmentation::ColorJitter { .. } => "color_jitter",
            Augmentation::Gamma { .. } => "gamma",
            Augmentation::Lut3d { .. } => "lut3d",
            Augmentation::LocalSoftLight { .. } => "local_soft_light",
            Augmentation::LocalDodge { .. } => "local_dodge",
            Augmentation::LocalGrainMerge { .. } => "local_grain_merge",
            Augmentation::LocalGrainExtract { .. } => "local_grain_extract",
        }
    }

    fn lighting(&self) -> Option<(BlendMode, f64, u64)> {
        match *self {
            Augmentation::LocalSoftLight { strength, seed } => Some((BlendMode::SoftLight, strength, seed)),
            Augmentation::LocalDodge { strength, seed } => Some((BlendMode::Dodge, strength, seed)),
            Augmentation::LocalGrainMerge { strength, seed } => Some((BlendMode::GrainMerge, strength, seed)),
            Augmentation::LocalGrainExtract { strength, seed } => Some((BlendMode::GrainExtract, strength, seed)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Augmentation::BrightnessContrast { brightness, contrast } => {
                in_range("brightness", brightness, BRIGHTNESS_RANGE)?;
                in_range("contrast", contrast, CONTRAST_RANGE)
            }
            Augmentation::ColorJitter { hue_shift, sat_scale } => {
                in_range("hue_shift", hue_shift, HUE_SHIFT_RANGE)?;
                in_range("sat_scale", sat_scale, SATURATION_RANGE)
            }
            Augmentation::Gamma { gamma } => in_range("gamma", gamma, GAMMA_RANGE),
            Augmentation::Lut3d {
                lattice_size, strength, ..
            } => {
                if lattice_size < 2 {
                    return Err(Error::InvalidArgument("lattice size must be >= 2".into()));
                }
                in_range("strength", strength, LUT_STRENGTH_RANGE)
            }
            _ => {
                let (_, strength, _) = self.lighting().expect("lighting variant");
                in_range("strength", strength, LIGHTING_STRENGTH_RANGE)
            }
        }
    }

    pub fn apply(&self, img: &Image, mask: &Mask) -> Result<Image> {
        match *self {
            Augmentation::BrightnessContrast { brightness, contrast } => {
                apply_brightness_contrast(img, mask, brightness, contrast)
            }
            Augmentation::ColorJitter { hue_shift, sat_scale } => apply_color_jitter(img, mask, hue_shift, sat_scale),
            Augmentation::Gamma { gamma } => apply_gamma(img, mask, gamma),
            Augmentation::Lut3d {
                lattice_size,
                strength,
                seed,
            } => apply_lut3d(img, mask, &Lut3d::random(lattice_size, strength, seed)?),
            _ => {
                let (mode, strength, seed) = self.lighting().expect("lighting variant");
                apply_local_lighting(img, mask, mode, strength, seed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn px(rgb: [f32; 3]) -> Image {
        Image::new(1, 1, 3, rgb.to_vec()).unwrap()
    }

    fn one() -> Mask {
        Mask::filled(1, 1, 1.0).unwrap()
    }

    fn test_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(24, 24, 3, |_, _, _| rng.random_range(0..=255u8) as f32 / 255.0).unwrap()
    }

    fn half_mask() -> Mask {
        Mask::from_fn(24, 24, |y, x| (y / 4 + x / 5) % 2 == 0).unwrap()
    }

    #[test]
    fn gamma_examples() {
        assert_abs_diff_eq!(apply_gamma(&px([0.25; 3]), &one(), 0.5).unwrap().get(0, 0, 0), 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(
            apply_gamma(&px([0.5; 3]), &one(), 2.2).unwrap().get(0, 0, 0) as f64,
            0.5f64.powf(2.2),
            epsilon = 1e-7
        );
        assert_abs_diff_eq!(0.5f64.powf(2.2), 0.2176, epsilon = 1e-4);
        assert!(apply_gamma(&px([0.5; 3]), &one(), 0.0).is_err());
    }

    #[test]
    fn brightness_contrast_examples() {
        let v = apply_brightness_contrast(&px([0.5; 3]), &one(), 0.2, 1.0).unwrap();
        assert_abs_diff_eq!(v.get(0, 0, 0), 0.7, epsilon = 1e-6);
        let v = apply_brightness_contrast(&px([0.8; 3]), &one(), 0.0, 0.5).unwrap();
        assert_abs_diff_eq!(v.get(0, 0, 0), 0.65, epsilon = 1e-6);
    }

    #[test]
    fn hue_rotation_red_to_green() {
        let out = apply_color_jitter(&px([1.0, 0.0, 0.0]), &one(), 1.0 / 3.0, 1.0).unwrap();
        assert_abs_diff_eq!(out.get(0, 0, 0), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out.get(0, 0, 1), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out.get(0, 0, 2), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn jitter_leaves_gray_alone() {
        let g = px([0.4, 0.4, 0.4]);
        assert_eq!(apply_color_jitter(&g, &one(), 0.07, 1.4).unwrap(), g);
    }

    #[test]
    fn hsv_round_trip() {
        let img = test_image(1);
        for i in 0..img.pixel_count() {
            let p = img.pixel(i);
            let rgb = [p[0] as f64, p[1] as f64, p[2] as f64];
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lut_cases() {
        let img = test_image(2);
        let all = Mask::filled(24, 24, 1.0).unwrap();
        let gray = Lut3d::from_fn(5, |_| [0.5; 3]).unwrap();
        assert!(apply_lut3d(&img, &all, &gray).unwrap().data().iter().all(|v| (*v - 0.5).abs() < 1e-7));

        // Trilinear interpolation reproduces an affine map exactly.
        let m = [[0.6, 0.2, 0.1], [0.1, 0.7, 0.1], [0.05, 0.1, 0.8]];
        let lin = |rgb: [f64; 3]| -> [f64; 3] { std::array::from_fn(|i| (0..3).map(|j| m[i][j] * rgb[j]).sum()) };
        let lut = Lut3d::from_fn(2, lin).unwrap();
        let out = apply_lut3d(&img, &all, &lut).unwrap();
        for i in 0..img.pixel_count() {
            let p = img.pixel(i);
            let want = lin([p[0] as f64, p[1] as f64, p[2] as f64]);
            for c in 0..3 {
                assert!((out.pixel(i)[c] as f64 - want[c]).abs() < 1e-6);
            }
        }
        assert!(Lut3d::new(1, vec![[0.0; 3]]).is_err());
        assert!(Lut3d::new(3, vec![[0.0; 3]; 26]).is_err());
    }

    #[test]
    fn soft_light_formula() {
        assert_abs_diff_eq!(BlendMode::SoftLight.blend(0.4, 0.25), 0.28, epsilon = 1e-12);
    }

    #[test]
    fn identity_parameters_are_exact_no_ops() {
        let img = test_image(3);
        let mask = half_mask();
        assert_eq!(apply_gamma(&img, &mask, 1.0).unwrap(), img);
        assert_eq!(apply_brightness_contrast(&img, &mask, 0.0, 1.0).unwrap(), img);
        assert_eq!(apply_color_jitter(&img, &mask, 0.0, 1.0).unwrap(), img);
        assert_eq!(apply_lut3d(&img, &mask, &Lut3d::identity(9).unwrap()).unwrap(), img);
        let flat = LightingOverlay::constant(24, 24, 0.5).unwrap();
        for mode in [BlendMode::GrainMerge, BlendMode::GrainExtract, BlendMode::SoftLight] {
            assert_eq!(apply_overlay(&img, &mask, mode, &flat).unwrap(), img, "{mode:?}");
        }
    }

    #[test]
    fn augmentations_never_touch_unmasked_pixels() {
        let img = test_image(4);
        let mask = half_mask();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..64 {
            let aug = Augmentation::sample(&mut rng);
            aug.validate().unwrap();
            let out = aug.apply(&img, &mask).unwrap();
            for i in 0..img.pixel_count() {
                if !mask.is_selected(i) {
                    assert_eq!(out.pixel(i), img.pixel(i), "{}", aug.name());
                }
            }
        }
    }

    #[test]
    fn sampling_covers_the_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..400 {
            seen.insert(Augmentation::sample(&mut rng).name());
        }
        assert_eq!(seen.len(), Augmentation::KINDS);
    }

    #[test]
    fn descriptor_serializes_with_op_tag() {
        let a = Augmentation::Gamma { gamma: 1.5 };
        let json = serde_json::to_value(&a).unwrap();
        assert_eq!(json["op"], "gamma");
        let back: Augmentation = serde_json::from_value(json).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn local_lighting_is_seed_deterministic() {
        let img = test_image(7);
        let mask = half_mask();
        let a = apply_local_lighting(&img, &mask, BlendMode::Dodge, 0.8, 11).unwrap();
        let b = apply_local_lighting(&img, &mask, BlendMode::Dodge, 0.8, 11).unwrap();
        assert_eq!(a, b);
        assert!(apply_local_lighting(&img, &Mask::filled(24, 24, 0.0).unwrap(), BlendMode::Dodge, 0.8, 1).is_err());
    }
}
