//! Referenced quality metrics on the 8-bit scale and the dataset sweep.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::list_records;
use crate::dataset::store::read_sample;
use crate::error::{Error, Result};
use crate::imaging::{check_aligned, quantize_u8, resize, Image, Mask, ResizeMethod, LUMA_WEIGHTS};
use crate::inference::{harmonize, HarmonizeRequest};
use crate::model::IphModel;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    check_aligned(a.dims(), b.dims())?;
    if a.channels() != b.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} channels",
            a.channels(),
            b.channels()
        )));
    }
    Ok(())
}

fn mse_over(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_pair(a, b)?;
    let c = a.channels();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for i in 0..a.pixel_count() {
        if mask.is_some_and(|m| !m.is_selected(i)) {
            continue;
        }
        for k in 0..c {
            let d = quantize_u8(a.data()[i * c + k]) as f64 - quantize_u8(b.data()[i * c + k]) as f64;
            sum += d * d;
        }
        n += c;
    }
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / n as f64)
}

/// Mean squared error over all pixels and channels, on the 8-bit values the
/// images would be stored as.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    mse_over(a, b, None)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Luminance on the 0–255 scale, row-major.
fn luma255(img: &Image) -> Vec<f64> {
    let c = img.channels();
    (0..img.pixel_count())
        .map(|i| {
            let px = img.pixel(i);
            let y = if c == 3 {
                px.iter().zip(LUMA_WEIGHTS).map(|(v, w)| *v as f64 * w as f64).sum()
            } else {
                px[0] as f64
            };
            y * 255.0
        })
        .collect()
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of a row-major `h×w` field.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = taps.iter().enumerate().map(|(j, t)| t * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = taps.iter().enumerate().map(|(j, t)| t * rows[(oy + j) * ow + ox]).sum();
        }
    }
    out
}

/// Per-window SSIM values over valid window positions, row-major
/// `(h−10)×(w−10)`.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x = luma255(a);
    let y = luma255(b);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let sxx = filter_valid(&prod(&x, &x), h, w, &taps);
    let syy = filter_valid(&prod(&y, &y), h, w, &taps);
    let sxy = filter_valid(&prod(&x, &y), h, w, &taps);
    Ok((0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2))
        })
        .collect())
}

/// Structural similarity of the luminance channels: Gaussian 11×11 window,
/// σ = 1.5, averaged over every valid window position.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let map = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// SSIM averaged over windows centred inside `mask`.
fn ssim_masked(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    let map = ssim_map(a, b)?;
    let (_, w) = a.dims();
    let ow = w - SSIM_WINDOW + 1;
    let r = SSIM_WINDOW / 2;
    let picked: Vec<f64> = map
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.is_selected((i / ow + r) * w + i % ow + r))
        .map(|(_, v)| *v)
        .collect();
    if picked.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok(picked.iter().sum::<f64>() / picked.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

/// Scores `pred` against `gt`, optionally restricted to `fg`.
pub fn score(pred: &Image, gt: &Image, fg: Option<&Mask>) -> Result<ImageScores> {
    let (mse, ssim) = match fg {
        Some(m) => (mse_over(pred, gt, Some(m))?, ssim_masked(pred, gt, m)?),
        None => (mse(pred, gt)?, ssim(pred, gt)?),
    };
    Ok(ImageScores {
        psnr: psnr_from_mse(mse),
        ssim,
        mse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub n_images: usize,
    /// Records that could not be read or scored.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    #[serde(flatten)]
    pub scores: ImageScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub row: MetricsRow,
    pub images: Vec<ImageMetrics>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub options: EvalOptions,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalResolution {
    /// Stored resolution.
    #[default]
    Native,
    /// Every record resized to 256×256 first.
    Fixed256,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    pub resolution: EvalResolution,
    /// Score the foreground only (diagnostic).
    pub foreground_only: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    /// The unharmonized composite itself.
    DirectComposite,
    /// The ground truth against itself, a sanity row.
    GroundTruth,
    Model { label: &'a str, model: &'a IphModel },
}

impl Method<'_> {
    pub fn label(&self) -> String {
        match self {
            Method::DirectComposite => "direct_composite".into(),
            Method::GroundTruth => "ground_truth".into(),
            Method::Model { label, .. } => label.to_string(),
        }
    }
}

fn eval_record(dir: &Path, meta: crate::dataset::SampleMeta, method: &Method<'_>, opts: &EvalOptions) -> Result<ImageScores> {
    let mut s = read_sample(dir, meta)?;
    if opts.resolution == EvalResolution::Fixed256 {
        s.composite = resize(&s.composite, 256, 256, ResizeMethod::Bilinear)?;
        s.ground_truth = resize(&s.ground_truth, 256, 256, ResizeMethod::Bilinear)?;
        s.fg_mask = s.fg_mask.resize_binary(256, 256)?;
        s.guide_mask = s.guide_mask.resize_binary(256, 256)?;
    }
    let pred = match method {
        Method::DirectComposite => s.composite.clone(),
        Method::GroundTruth => s.ground_truth.clone(),
        Method::Model { model, .. } => {
            let req = HarmonizeRequest::new(s.composite.clone(), s.fg_mask.clone(), Some(s.guide_mask.clone()));
            harmonize(&req, model)?.image
        }
    };
    score(&pred, &s.ground_truth, opts.foreground_only.then_some(&s.fg_mask))
}

/// Averages per-image metrics of `method` over every record of `dataset`.
/// Records are processed in id order, so the result does not depend on
/// directory listing order.
pub fn evaluate(method: &Method<'_>, dataset: impl AsRef<Path>, opts: &EvalOptions) -> Result<MethodReport> {
    let dataset = dataset.as_ref();
    let mut records = list_records(dataset)?;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut images = Vec::new();
    let mut skipped = 0;
    for meta in records {
        let id = meta.id.clone();
        match eval_record(&dataset.join(&id), meta, method, opts) {
            Ok(scores) => images.push(ImageMetrics { id, scores }),
            Err(e) => {
                warn!("skipping record {id}: {e}");
                skipped += 1;
            }
        }
    }
    let n = images.len();
    let mean = |f: fn(&ImageScores) -> f64| {
        if n == 0 {
            f64::NAN
        } else {
            images.iter().map(|m| f(&m.scores)).sum::<f64>() / n as f64
        }
    };
    let row = MetricsRow {
        method: method.label(),
        psnr: mean(|s| s.psnr),
        ssim: mean(|s| s.ssim),
        mse: mean(|s| s.mse),
        n_images: n,
        skipped,
    };
    Ok(MethodReport { row, images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.random::<f32>()).unwrap().quantize()
    }

    /// Direct windowed SSIM: explicit 2-D Gaussian weights per window.
    fn naive_ssim(a: &Image, b: &Image) -> f64 {
        let (h, w) = a.dims();
        let lum = |img: &Image, y: usize, x: usize| {
            let p = img.pixel(y * w + x);
            255.0 * (0.299f32 as f64 * p[0] as f64 + 0.587f32 as f64 * p[1] as f64 + 0.114f32 as f64 * p[2] as f64)
        };
        let mut g = [[0.0f64; 11]; 11];
        let mut total = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-(((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5))).exp();
                total += *v;
            }
        }
        let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = g[i][j] / total;
                        mx += k * lum(a, y0 + i, x0 + j);
                        my += k * lum(b, y0 + i, x0 + j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = g[i][j] / total;
                        let dx = lum(a, y0 + i, x0 + j) - mx;
                        let dy = lum(b, y0 + i, x0 + j) - my;
                        vx += k * dx * dx;
                        vy += k * dy * dy;
                        cxy += k * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn mse_and_psnr_examples() {
        let a = Image::filled(8, 8, 3, 0.0).unwrap();
        let b = Image::filled(8, 8, 3, 10.0 / 255.0).unwrap();
        assert!((mse(&a, &b).unwrap() - 100.0).abs() < 1e-9);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 10.0 * (65025.0f64 / 100.0).log10()).abs() < 1e-9);
        assert!((p - 28.13).abs() < 0.005);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!((psnr_from_mse(50.0) - psnr_from_mse(100.0) - 10.0 * 2f64.log10()).abs() < 1e-12);
        assert!(mse(&a, &Image::filled(8, 7, 3, 0.0).unwrap()).is_err());
    }

    #[test]
    fn mse_matches_direct_accumulation_and_psnr_identity() {
        for seed in 0..20 {
            let a = rand_image(9, 13, seed);
            let b = rand_image(9, 13, seed + 100);
            let mut direct = 0.0f64;
            for (x, y) in a.to_u8().iter().zip(b.to_u8()) {
                direct += (*x as f64 - y as f64).powi(2);
            }
            direct /= (9 * 13 * 3) as f64;
            let m = mse(&a, &b).unwrap();
            assert!((m - direct).abs() < 1e-6);
            assert!((psnr(&a, &b).unwrap() - 10.0 * (255.0f64.powi(2) / m).log10()).abs() < 1e-9);
            assert_eq!(m, mse(&b, &a).unwrap());
        }
    }

    #[test]
    fn ssim_matches_naive_oracle() {
        for seed in 0..5 {
            let a = rand_image(16, 19, seed);
            let b = rand_image(16, 19, seed + 50);
            let fast = ssim(&a, &b).unwrap();
            assert!((fast - naive_ssim(&a, &b)).abs() <= 1e-6);
            assert!((fast - ssim(&b, &a).unwrap()).abs() <= 1e-12);
            assert!((-1.0..=1.0).contains(&fast));
        }
    }

    #[test]
    fn ssim_examples() {
        let a = rand_image(20, 20, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut neg = a.clone();
        neg.map_pixels(|_, px| px.iter_mut().for_each(|v| *v = 1.0 - *v));
        assert!(ssim(&a, &neg).unwrap() < 1.0);
        assert!(ssim(&rand_image(10, 20, 1), &rand_image(10, 20, 2)).is_err());
    }

    #[test]
    fn evaluation_rows() {
        use crate::dataset::toy::write_toy_sources;
        use crate::dataset::build_dataset;
        let dir = tempfile::tempdir().unwrap();
        let ann = write_toy_sources(dir.path().join("src"), 3, 48, 1).unwrap();
        let data = dir.path().join("data");
        build_dataset(dir.path().join("src"), &ann, &data, 5, 3).unwrap();
        let opts = EvalOptions::default();
        let gt = evaluate(&Method::GroundTruth, &data, &opts).unwrap();
        assert_eq!(gt.row.n_images, 5);
        assert_eq!(gt.row.psnr, PSNR_CAP);
        assert_eq!(gt.row.mse, 0.0);
        assert!((gt.row.ssim - 1.0).abs() < 1e-12);
        let direct = evaluate(&Method::DirectComposite, &data, &opts).unwrap();
        assert!(direct.row.mse > 0.0);
        assert_eq!(direct.row.method, "direct_composite");
        let fixed = evaluate(
            &Method::DirectComposite,
            &data,
            &EvalOptions {
                resolution: EvalResolution::Fixed256,
                foreground_only: true,
            },
        )
        .unwrap();
        assert!(fixed.row.mse > direct.row.mse);

        // A broken record is counted, not fatal.
        std::fs::write(data.join("000001").join("gt.png"), b"junk").unwrap();
        let again = evaluate(&Method::DirectComposite, &data, &opts).unwrap();
        assert_eq!((again.row.n_images, again.row.skipped), (4, 1));
    }
}
