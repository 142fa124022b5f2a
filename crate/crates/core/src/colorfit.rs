//! Polynomial RGB→RGB color transforms, fit by least squares at low resolution
//! and replayed on full-resolution pixels.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{check_aligned, Image, Mask};

pub const DEFAULT_DEGREE: usize = 3;

/// Exponent triples `(r, g, b)` of every monomial with total degree at most
/// `degree`, ordered by total degree and then lexicographically descending.
/// The first term is always the bias `(0, 0, 0)`.
pub fn basis_exponents(degree: usize) -> Vec<[u32; 3]> {
    let mut terms = Vec::new();
    for total in 0..=degree as u32 {
        for r in (0..=total).rev() {
            for g in (0..=total - r).rev() {
                terms.push([r, g, total - r - g]);
            }
        }
    }
    terms
}

/// Number of monomials in three variables of degree at most `degree`.
pub fn basis_len(degree: usize) -> usize {
    (degree + 1) * (degree + 2) * (degree + 3) / 6
}

fn eval_basis(exponents: &[[u32; 3]], rgb: [f64; 3], out: &mut [f64]) {
    for (slot, e) in out.iter_mut().zip(exponents) {
        *slot = rgb[0].powi(e[0] as i32) * rgb[1].powi(e[1] as i32) * rgb[2].powi(e[2] as i32);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorTransform {
    degree: usize,
    /// One coefficient row per output channel, aligned with [`basis_exponents`].
    coefficients: [Vec<f64>; 3],
    /// Set when the fit was rank-deficient and the minimum-norm solution was used.
    pub degenerate: bool,
}

impl ColorTransform {
    pub fn new(degree: usize, coefficients: [Vec<f64>; 3]) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidArgument("polynomial degree must be at least 1".into()));
        }
        let n = basis_len(degree);
        if coefficients.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument(format!(
                "degree {degree} needs {n} coefficients per channel"
            )));
        }
        Ok(Self {
            degree,
            coefficients,
            degenerate: false,
        })
    }

    pub fn identity(degree: usize) -> Result<Self> {
        let exps = basis_exponents(degree);
        let mut coefficients: [Vec<f64>; 3] = Default::default();
        for (c, row) in coefficients.iter_mut().enumerate() {
            *row = exps
                .iter()
                .map(|e| {
                    let mut unit = [0u32; 3];
                    unit[c] = 1;
                    if *e == unit {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
        }
        Self::new(degree, coefficients)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coefficients(&self) -> &[Vec<f64>; 3] {
        &self.coefficients
    }

    /// Maps one RGB triple without clamping.
    pub fn eval(&self, rgb: [f64; 3]) -> [f64; 3] {
        let exps = basis_exponents(self.degree);
        let mut phi = vec![0.0; exps.len()];
        eval_basis(&exps, rgb, &mut phi);
        let mut out = [0.0; 3];
        for (o, row) in out.iter_mut().zip(&self.coefficients) {
            *o = row.iter().zip(&phi).map(|(a, b)| a * b).sum();
        }
        out
    }
}

/// Least-squares fit of `dst ≈ T(src)` over the pixels `region` selects.
pub fn fit_color_transform(src: &Image, dst: &Image, region: &Mask, degree: usize) -> Result<ColorTransform> {
    check_aligned(src.dims(), dst.dims())?;
    check_aligned(src.dims(), region.dims())?;
    if src.channels() != 3 || dst.channels() != 3 {
        return Err(Error::InvalidArgument("color transforms need RGB images".into()));
    }
    if degree == 0 {
        return Err(Error::InvalidArgument("polynomial degree must be at least 1".into()));
    }
    let exps = basis_exponents(degree);
    let terms = exps.len();
    let idx = region.selected_indices();
    if idx.len() < terms {
        return Err(Error::InvalidArgument(format!(
            "fit region has {} pixels, degree {degree} needs at least {terms}",
            idx.len()
        )));
    }

    let mut design = DMatrix::<f64>::zeros(idx.len(), terms);
    let mut targets = DMatrix::<f64>::zeros(idx.len(), 3);
    let mut phi = vec![0.0; terms];
    for (row, &i) in idx.iter().enumerate() {
        let s = src.pixel(i);
        eval_basis(&exps, [s[0] as f64, s[1] as f64, s[2] as f64], &mut phi);
        for (col, v) in phi.iter().enumerate() {
            design[(row, col)] = *v;
        }
        let d = dst.pixel(i);
        for c in 0..3 {
            targets[(row, c)] = d[c] as f64;
        }
    }

    let svd = design.svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * (idx.len().max(terms) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let solution = svd
        .solve(&targets, tol)
        .map_err(|e| Error::InvalidArgument(format!("least-squares solve failed: {e}")))?;

    let mut coefficients: [Vec<f64>; 3] = Default::default();
    for (c, row) in coefficients.iter_mut().enumerate() {
        let col: DVector<f64> = solution.column(c).into();
        *row = col.iter().copied().collect();
    }
    let mut t = ColorTransform::new(degree, coefficients)?;
    t.degenerate = rank < terms;
    Ok(t)
}

/// Maps every pixel `region` selects through `t`, clamped to `[0, 1]`; other
/// pixels are copied unchanged.
pub fn apply_color_transform(img: &Image, t: &ColorTransform, region: &Mask) -> Result<Image> {
    check_aligned(img.dims(), region.dims())?;
    if img.channels() != 3 {
        return Err(Error::InvalidArgument("color transforms need RGB images".into()));
    }
    let exps = basis_exponents(t.degree);
    let mut phi = vec![0.0; exps.len()];
    let mut out = img.clone();
    out.map_pixels(|i, px| {
        if !region.is_selected(i) {
            return;
        }
        eval_basis(&exps, [px[0] as f64, px[1] as f64, px[2] as f64], &mut phi);
        for (v, row) in px.iter_mut().zip(&t.coefficients) {
            let mapped: f64 = row.iter().zip(&phi).map(|(a, b)| a * b).sum();
            *v = mapped.clamp(0.0, 1.0) as f32;
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.random()).unwrap()
    }

    #[test]
    fn basis_sizes() {
        for d in 1..=5 {
            assert_eq!(basis_exponents(d).len(), basis_len(d));
            assert_eq!(basis_exponents(d)[0], [0, 0, 0]);
        }
        assert_eq!(basis_len(3), 20);
    }

    #[test]
    fn identity_fit_recovers_identity() {
        let src = random_image(16, 16, 1);
        let region = Mask::filled(16, 16, 1.0).unwrap();
        let t = fit_color_transform(&src, &src, &region, 1).unwrap();
        let id = ColorTransform::identity(1).unwrap();
        for (a, b) in t.coefficients().iter().flatten().zip(id.coefficients().iter().flatten()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(!t.degenerate);
    }

    #[test]
    fn half_scale_fit() {
        let src = random_image(16, 16, 2);
        let dst = Image::from_clamped(16, 16, 3, src.data().iter().map(|v| 0.5 * v).collect()).unwrap();
        let region = Mask::filled(16, 16, 1.0).unwrap();
        let t = fit_color_transform(&src, &dst, &region, 1).unwrap();
        // Basis order for degree 1: [1, r, g, b].
        for c in 0..3 {
            let row = &t.coefficients()[c];
            assert!(row[0].abs() < 1e-6);
            for k in 0..3 {
                let want = if k == c { 0.5 } else { 0.0 };
                assert!((row[1 + k] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cubic_mapping_is_recovered() {
        // Known smooth cubic polynomial, 64x64 = 4096 samples.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = Image::from_fn(64, 64, 3, |_, _, _| rng.random_range(0.1..0.9)).unwrap();
        let f = |p: &[f32]| -> [f64; 3] {
            let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
            [
                0.05 + 0.8 * r + 0.1 * g * b - 0.2 * r * r * r + 0.1 * g * g,
                0.1 + 0.7 * g + 0.15 * r * b + 0.1 * b * b * b,
                0.02 + 0.6 * b + 0.2 * r * g - 0.05 * g * g * r + 0.05,
            ]
        };
        let mut dst_data = Vec::new();
        for i in 0..src.pixel_count() {
            dst_data.extend(f(src.pixel(i)).iter().map(|v| *v as f32));
        }
        let dst = Image::new(64, 64, 3, dst_data).unwrap();
        let region = Mask::filled(64, 64, 1.0).unwrap();
        let t = fit_color_transform(&src, &dst, &region, 3).unwrap();
        let mut se = 0.0;
        for i in 0..src.pixel_count() {
            let s = src.pixel(i);
            let got = t.eval([s[0] as f64, s[1] as f64, s[2] as f64]);
            let want = dst.pixel(i);
            for c in 0..3 {
                se += (got[c] - want[c] as f64).powi(2);
            }
        }
        let rmse = (se / (3 * src.pixel_count()) as f64).sqrt();
        assert!(rmse < 1e-4, "rmse {rmse}");
    }

    #[test]
    fn constant_source_is_degenerate() {
        let src = Image::filled(8, 8, 3, 0.4).unwrap();
        let dst = Image::filled(8, 8, 3, 0.6).unwrap();
        let region = Mask::filled(8, 8, 1.0).unwrap();
        let t = fit_color_transform(&src, &dst, &region, 3).unwrap();
        assert!(t.degenerate);
        let out = apply_color_transform(&src, &t, &region).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.6).abs() < 1e-5));
    }

    #[test]
    fn too_few_region_pixels() {
        let src = random_image(4, 4, 4);
        let region = Mask::from_fn(4, 4, |y, _| y == 0).unwrap();
        assert!(fit_color_transform(&src, &src, &region, 3).is_err());
    }

    #[test]
    fn apply_identity_and_zero() {
        let img = random_image(8, 8, 5);
        let all = Mask::filled(8, 8, 1.0).unwrap();
        let out = apply_color_transform(&img, &ColorTransform::identity(3).unwrap(), &all).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let zero = ColorTransform::new(2, [vec![0.0; 10], vec![0.0; 10], vec![0.0; 10]]).unwrap();
        let half = Mask::from_fn(8, 8, |_, x| x < 4).unwrap();
        let out = apply_color_transform(&img, &zero, &half).unwrap();
        for i in 0..64 {
            if half.is_selected(i) {
                assert!(out.pixel(i).iter().all(|v| *v == 0.0));
            } else {
                assert_eq!(out.pixel(i), img.pixel(i));
            }
        }
    }

    #[test]
    fn fit_then_apply_never_worse_than_identity() {
        for seed in 0..5 {
            let src = random_image(20, 20, 10 + seed);
            let dst = random_image(20, 20, 100 + seed);
            let region = Mask::from_fn(20, 20, |y, _| y > 3).unwrap();
            let t = fit_color_transform(&src, &dst, &region, 2).unwrap();
            let mapped = apply_color_transform(&src, &t, &region).unwrap();
            let err = |img: &Image| -> f64 {
                region
                    .selected_indices()
                    .iter()
                    .map(|&i| {
                        img.pixel(i)
                            .iter()
                            .zip(dst.pixel(i))
                            .map(|(a, b)| ((a - b) as f64).powi(2))
                            .sum::<f64>()
                    })
                    .sum()
            };
            assert!(err(&mapped) <= err(&src) + 1e-9);
        }
    }

    #[test]
    fn round_trip_recovers_destination() {
        let src = random_image(32, 32, 6);
        let dst = Image::from_clamped(
            32,
            32,
            3,
            src.data().iter().map(|v| 0.1 + 0.7 * v * v).collect(),
        )
        .unwrap();
        let region = Mask::filled(32, 32, 1.0).unwrap();
        let t = fit_color_transform(&src, &dst, &region, 3).unwrap();
        let out = apply_color_transform(&src, &t, &region).unwrap();
        for (a, b) in out.data().iter().zip(dst.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
