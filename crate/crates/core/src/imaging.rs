//! Image containers and the pixel math shared by every other module.
//!
//! Images are stored row-major with interleaved channels (`H×W×C`) as `f32`
//! values in `[0, 1]`. Masks are single-channel `H×W` planes in `[0, 1]`; a
//! pixel counts as *selected* when its value exceeds 0.5.

use crate::error::{Error, Result};

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from values that may stray outside `[0, 1]`, clamping them.
    /// Non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_clamped(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, index: usize) -> &[f32] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Mutable access to each pixel, clamping the result back into range.
    pub fn map_pixels(&mut self, mut f: impl FnMut(usize, &mut [f32])) {
        let channels = self.channels;
        for (i, px) in self.data.chunks_exact_mut(channels).enumerate() {
            f(i, px);
            for v in px.iter_mut() {
                *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            }
        }
    }

    /// Snaps every value onto the 8-bit grid `k/255`.
    pub fn quantize(&self) -> Image {
        let data = self.data.iter().map(|v| quantize_u8(*v) as f32 / 255.0).collect();
        Image { data, ..*self }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| quantize_u8(*v)).collect()
    }

    /// Channel-planar (`C×H×W`) copy, the layout tensors use.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.pixel_count();
        let mut out = vec![0.0; n * self.channels];
        for i in 0..n {
            for c in 0..self.channels {
                out[c * n + i] = self.data[i * self.channels + c];
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, channels: usize, planar: &[f32]) -> Result<Self> {
        let n = height * width;
        if planar.len() != n * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} planar values for {height}x{width}x{channels}",
                planar.len()
            )));
        }
        let mut data = vec![0.0; n * channels];
        for i in 0..n {
            for c in 0..channels {
                data[i * channels + c] = planar[c * n + i];
            }
        }
        Self::from_clamped(height, width, channels, data)
    }

    /// Multiplies every channel by the mask.
    pub fn masked(&self, mask: &Mask) -> Result<Image> {
        check_aligned(self.dims(), mask.dims())?;
        let mut out = self.clone();
        out.map_pixels(|i, px| {
            let m = mask.data[i];
            px.iter_mut().for_each(|v| *v *= m);
        });
        Ok(out)
    }
}

pub(crate) fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(if f(y, x) { 1.0 } else { 0.0 });
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn is_selected(&self, index: usize) -> bool {
        self.data[index] > 0.5
    }

    /// Number of selected (`> 0.5`) pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v > 0.5).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|i| self.data[*i] > 0.5).collect()
    }

    pub fn binarize(&self, threshold: f32) -> Mask {
        let data = self
            .data
            .iter()
            .map(|v| if *v > threshold { 1.0 } else { 0.0 })
            .collect();
        Mask { data, ..*self }
    }

    /// Every pixel with nonzero weight.
    pub fn support(&self) -> Mask {
        let data = self.data.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
        Mask { data, ..*self }
    }

    pub fn invert(&self) -> Mask {
        let data = self.data.iter().map(|v| 1.0 - v).collect();
        Mask { data, ..*self }
    }

    /// Pixels selected in both masks.
    pub fn intersect_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a > 0.5 && **b > 0.5)
            .count()
    }

    /// Clears every pixel that `other` selects.
    pub fn subtract(&self, other: &Mask) -> Result<Mask> {
        check_aligned(self.dims(), other.dims())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| if *b > 0.5 { 0.0 } else { *a })
            .collect();
        Ok(Mask { data, ..*self })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| quantize_u8(*v)).collect()
    }

    pub fn as_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.clone(),
        }
    }

    pub fn from_image(img: &Image) -> Result<Mask> {
        if img.channels != 1 {
            return Err(Error::InvalidArgument("mask images must be single-channel".into()));
        }
        Mask::new(img.height, img.width, img.data.clone())
    }

    pub fn resize(&self, out_h: usize, out_w: usize, method: ResizeMethod) -> Result<Mask> {
        Mask::from_image(&resize(&self.as_image(), out_h, out_w, method)?)
    }

    /// Bilinear resize followed by re-thresholding at 0.5.
    pub fn resize_binary(&self, out_h: usize, out_w: usize) -> Result<Mask> {
        Ok(self.resize(out_h, out_w, ResizeMethod::Bilinear)?.binarize(0.5))
    }
}

pub(crate) fn check_aligned(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Per-pixel Rec. 601 luma. Single-channel input is returned as a copy.
pub fn to_luminance(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| {
            let l = LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2];
            l.clamp(0.0, 1.0)
        })
        .collect();
    Image {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    }
}

fn masked_values(values: &Image, mask: &Mask) -> Result<Vec<f64>> {
    if values.channels != 1 {
        return Err(Error::InvalidArgument("expected a single-channel image".into()));
    }
    check_aligned(values.dims(), mask.dims())?;
    let picked: Vec<f64> = values
        .data
        .iter()
        .zip(&mask.data)
        .filter(|(_, m)| **m > 0.5)
        .map(|(v, _)| *v as f64)
        .collect();
    if picked.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok(picked)
}

/// Percentile of an ascending-sorted slice, interpolating linearly between the
/// two closest ranks. `p` is in `[0, 100]`.
pub fn sorted_percentile(sorted: &[f64], p: f64) -> f64 {
    let (lo, hi, frac) = percentile_ranks(sorted.len(), p);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Lower rank, upper rank and interpolation weight of the `p`-th percentile
/// among `n` order statistics.
pub fn percentile_ranks(n: usize, p: f64) -> (usize, usize, f64) {
    let rank = (p.clamp(0.0, 100.0) / 100.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    (lo, hi.min(n - 1), rank - lo as f64)
}

pub fn masked_percentile(values: &Image, mask: &Mask, p: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside [0, 100]")));
    }
    let mut picked = masked_values(values, mask)?;
    picked.sort_by(f64::total_cmp);
    Ok(sorted_percentile(&picked, p))
}

pub fn masked_mean(values: &Image, mask: &Mask) -> Result<f64> {
    let picked = masked_values(values, mask)?;
    Ok(picked.iter().sum::<f64>() / picked.len() as f64)
}

/// `mask * fg + (1 - mask) * bg`, per channel.
pub fn alpha_composite(fg: &Image, bg: &Image, mask: &Mask) -> Result<Image> {
    check_aligned(fg.dims(), bg.dims())?;
    check_aligned(fg.dims(), mask.dims())?;
    if fg.channels != bg.channels {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} channels",
            fg.channels, bg.channels
        )));
    }
    let c = fg.channels;
    let mut data = Vec::with_capacity(fg.data.len());
    for (i, m) in mask.data.iter().enumerate() {
        for k in 0..c {
            let f = fg.data[i * c + k];
            let b = bg.data[i * c + k];
            // Exact pass-through at binary mask values.
            let v = if *m >= 1.0 {
                f
            } else if *m <= 0.0 {
                b
            } else {
                m * f + (1.0 - m) * b
            };
            data.push(v);
        }
    }
    Image::from_clamped(fg.height, fg.width, c, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResizeMethod {
    #[default]
    Bilinear,
    Nearest,
}

/// Separable resampling with half-pixel centers (no antialiasing).
pub fn resize(img: &Image, out_h: usize, out_w: usize, method: ResizeMethod) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "output size must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    if (out_h, out_w) == img.dims() {
        return Ok(img.clone());
    }
    let c = img.channels;
    let mut data = Vec::with_capacity(out_h * out_w * c);
    match method {
        ResizeMethod::Nearest => {
            let sy = img.height as f64 / out_h as f64;
            let sx = img.width as f64 / out_w as f64;
            for y in 0..out_h {
                let iy = (((y as f64 + 0.5) * sy).floor() as usize).min(img.height - 1);
                for x in 0..out_w {
                    let ix = (((x as f64 + 0.5) * sx).floor() as usize).min(img.width - 1);
                    data.extend_from_slice(img.pixel(iy * img.width + ix));
                }
            }
        }
        ResizeMethod::Bilinear => {
            let ys = bilinear_taps(img.height, out_h);
            let xs = bilinear_taps(img.width, out_w);
            for (y0, y1, fy) in &ys {
                for (x0, x1, fx) in &xs {
                    for k in 0..c {
                        let at = |yy: usize, xx: usize| img.data[(yy * img.width + xx) * c + k] as f64;
                        let top = at(*y0, *x0) * (1.0 - fx) + at(*y0, *x1) * fx;
                        let bottom = at(*y1, *x0) * (1.0 - fx) + at(*y1, *x1) * fx;
                        data.push((top * (1.0 - fy) + bottom * fy) as f32);
                    }
                }
            }
        }
    }
    Image::from_clamped(out_h, out_w, c, data)
}

fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn gray(values: &[f32]) -> Image {
        Image::new(1, values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn luminance_of_primaries() {
        let white = Image::filled(2, 2, 3, 1.0).unwrap();
        assert!(to_luminance(&white).data().iter().all(|v| (*v - 1.0).abs() < 1e-6));
        let black = Image::filled(2, 2, 3, 0.0).unwrap();
        assert!(to_luminance(&black).data().iter().all(|v| *v == 0.0));
        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(to_luminance(&red).data()[0], 0.299, epsilon = 1e-7);
    }

    #[test]
    fn luminance_passes_single_channel_through() {
        let g = gray(&[0.1, 0.7]);
        assert_eq!(to_luminance(&g), g);
    }

    #[test]
    fn percentile_interpolates_between_ranks() {
        let values: Vec<f32> = (1..=10).map(|i| i as f32 / 10.0).collect();
        let img = gray(&values);
        let mask = Mask::filled(1, 10, 1.0).unwrap();
        assert_abs_diff_eq!(masked_percentile(&img, &mask, 50.0).unwrap(), 0.55, epsilon = 1e-7);
        assert_abs_diff_eq!(masked_percentile(&img, &mask, 100.0).unwrap(), 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(masked_percentile(&img, &mask, 0.0).unwrap(), 0.1, epsilon = 1e-7);
    }

    #[test]
    fn percentile_of_constant_is_constant() {
        let img = Image::filled(4, 4, 1, 0.3).unwrap();
        let mask = Mask::filled(4, 4, 1.0).unwrap();
        for p in [0.0, 10.0, 37.5, 90.0, 100.0] {
            assert_eq!(masked_percentile(&img, &mask, p).unwrap(), 0.3f32 as f64);
        }
    }

    #[test]
    fn empty_region_is_rejected() {
        let img = Image::filled(2, 2, 1, 0.3).unwrap();
        let mask = Mask::filled(2, 2, 0.0).unwrap();
        assert!(matches!(masked_percentile(&img, &mask, 50.0), Err(Error::EmptyRegion)));
        assert!(matches!(masked_mean(&img, &mask), Err(Error::EmptyRegion)));
    }

    #[test]
    fn mean_of_two_pixels() {
        let img = gray(&[0.0, 1.0, 0.25]);
        let mask = Mask::new(1, 3, vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(masked_mean(&img, &mask).unwrap(), 0.5);
    }

    #[test]
    fn composite_extremes() {
        let fg = Image::filled(3, 3, 3, 1.0).unwrap();
        let bg = Image::filled(3, 3, 3, 0.0).unwrap();
        let ones = Mask::filled(3, 3, 1.0).unwrap();
        let zeros = Mask::filled(3, 3, 0.0).unwrap();
        let half = Mask::filled(3, 3, 0.5).unwrap();
        assert_eq!(alpha_composite(&fg, &bg, &ones).unwrap(), fg);
        assert_eq!(alpha_composite(&fg, &bg, &zeros).unwrap(), bg);
        assert!(alpha_composite(&fg, &bg, &half)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.5));
    }

    #[test]
    fn composite_rejects_misaligned() {
        let fg = Image::filled(3, 3, 3, 1.0).unwrap();
        let bg = Image::filled(3, 4, 3, 0.0).unwrap();
        let m = Mask::filled(3, 3, 1.0).unwrap();
        assert!(matches!(alpha_composite(&fg, &bg, &m), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn resize_cases() {
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 7 + x) * 3 + c) as f32 / 105.0).unwrap();
        assert_eq!(resize(&img, 5, 7, ResizeMethod::Bilinear).unwrap(), img);
        let flat = Image::filled(5, 7, 3, 0.42).unwrap();
        for (h, w) in [(1, 1), (3, 11), (20, 2)] {
            for m in [ResizeMethod::Bilinear, ResizeMethod::Nearest] {
                let r = resize(&flat, h, w, m).unwrap();
                assert!(r.data().iter().all(|v| (*v - 0.42).abs() < 1e-6));
            }
        }
        // 2x2 checkerboard sampled at its center.
        let checker = Image::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resize(&checker, 1, 1, ResizeMethod::Bilinear).unwrap();
        assert_abs_diff_eq!(r.data()[0], 0.5, epsilon = 1e-7);
    }

    #[test]
    fn binary_mask_resize_stays_binary() {
        let m = Mask::from_fn(16, 16, |y, x| y < 8 && x < 5).unwrap();
        let r = m.resize_binary(7, 9).unwrap();
        assert!(r.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(!r.is_empty());
    }

    fn brute_percentile(values: &[f32], mask: &[bool], p: f64) -> f64 {
        let mut v: Vec<f64> = values
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v as f64)
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = p / 100.0 * (v.len() - 1) as f64;
        let below = pos.floor();
        let above = pos.ceil();
        if below == above {
            v[below as usize]
        } else {
            v[below as usize] * (above - pos) + v[above as usize] * (pos - below)
        }
    }

    proptest! {
        #[test]
        fn percentile_matches_sort_oracle(
            pixels in prop::collection::vec((0.0f32..=1.0, any::<bool>()), 1..80),
            p in 0.0f64..=100.0,
        ) {
            prop_assume!(pixels.iter().any(|(_, m)| *m));
            let values: Vec<f32> = pixels.iter().map(|(v, _)| *v).collect();
            let sel: Vec<bool> = pixels.iter().map(|(_, m)| *m).collect();
            let img = gray(&values);
            let mask = Mask::new(1, values.len(), sel.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect()).unwrap();
            let got = masked_percentile(&img, &mask, p).unwrap();
            let want = brute_percentile(&values, &sel, p);
            prop_assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
            let lo = masked_percentile(&img, &mask, 0.0).unwrap();
            let hi = masked_percentile(&img, &mask, 100.0).unwrap();
            let mean = masked_mean(&img, &mask).unwrap();
            prop_assert!(lo <= mean + 1e-12 && mean <= hi + 1e-12);
        }

        #[test]
        fn composite_is_idempotent_for_binary_masks(
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let fg = Image::from_fn(6, 5, 3, |_, _, _| rng.random()).unwrap();
            let bg = Image::from_fn(6, 5, 3, |_, _, _| rng.random()).unwrap();
            let mask = Mask::from_fn(6, 5, |_, _| rng.random_bool(0.5)).unwrap();
            let once = alpha_composite(&fg, &bg, &mask).unwrap();
            let twice = alpha_composite(&fg, &once, &mask).unwrap();
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn mean_matches_accumulation_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let img = Image::from_fn(10, 10, 1, |_, _, _| rng.random()).unwrap();
        let mask = Mask::filled(10, 10, 1.0).unwrap();
        let mut sum = 0.0f64;
        for v in img.data() {
            sum += *v as f64;
        }
        assert_eq!(masked_mean(&img, &mask).unwrap(), sum / 100.0);
    }
}
