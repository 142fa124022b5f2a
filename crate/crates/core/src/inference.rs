//! Full-resolution harmonization and style-code blending for color transfer.
//!
//! The network runs at its own resolution. Its low-resolution foreground is
//! summarized by a polynomial RGB transform fit against the low-resolution
//! composite, and that transform is applied to the full-resolution foreground
//! before compositing onto the untouched background.

use serde::{Deserialize, Serialize};

use crate::colorfit::{apply_color_transform, basis_len, fit_color_transform, ColorTransform, DEFAULT_DEGREE};
use crate::error::{Error, Result};
use crate::imaging::{alpha_composite, check_aligned, resize, Image, Mask, ResizeMethod};
use crate::model::IphModel;

/// Smallest reference region, in pixels at model resolution.
pub const MIN_REFERENCE_PIXELS: usize = 16;
/// Largest tolerated guide/foreground overlap, as a fraction of the
/// foreground.
pub const MAX_GUIDE_OVERLAP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonizeOptions {
    pub return_lowres: bool,
    /// Upper bound; foregrounds with too few low-resolution pixels use a lower degree.
    pub poly_degree: usize,
}

impl Default for HarmonizeOptions {
    fn default() -> Self {
        Self {
            return_lowres: false,
            poly_degree: DEFAULT_DEGREE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HarmonizeRequest {
    pub composite: Image,
    pub fg_mask: Mask,
    pub guide_mask: Option<Mask>,
    pub options: HarmonizeOptions,
}

impl HarmonizeRequest {
    pub fn new(composite: Image, fg_mask: Mask, guide_mask: Option<Mask>) -> Self {
        Self {
            composite,
            fg_mask,
            guide_mask,
            options: HarmonizeOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.composite.channels() != 3 {
            return Err(Error::InvalidArgument("composite must be RGB".into()));
        }
        check_aligned(self.composite.dims(), self.fg_mask.dims())?;
        let fg = self.fg_mask.support();
        if fg.is_empty() {
            return Err(Error::EmptyRegion);
        }
        if let Some(guide) = &self.guide_mask {
            check_aligned(self.composite.dims(), guide.dims())?;
            let guide = guide.support();
            if guide.is_empty() {
                return Err(Error::EmptyReferenceRegion);
            }
            let overlap = guide.intersect_count(&fg) as f64 / fg.count() as f64;
            if overlap >= MAX_GUIDE_OVERLAP {
                return Err(Error::InvalidArgument(format!(
                    "guide overlaps {:.1}% of the foreground (limit {:.0}%)",
                    overlap * 100.0,
                    MAX_GUIDE_OVERLAP * 100.0
                )));
            }
        }
        if self.options.poly_degree == 0 {
            return Err(Error::InvalidArgument("polynomial degree must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HarmonizeOutput {
    /// Full-resolution result.
    pub image: Image,
    /// Raw network output at model resolution, when requested.
    pub lowres: Option<Image>,
    pub used_default_reference: bool,
    pub transform: ColorTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendRatios {
    pub r1: f64,
    pub r2: f64,
}

impl BlendRatios {
    pub fn new(r1: f64, r2: f64) -> Result<Self> {
        let r = Self { r1, r2 };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("r1", self.r1), ("r2", self.r2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// `r1·φ + (1−r2)·ψ`.
    pub fn blend(&self, phi: &[f32], psi: &[f32]) -> Result<Vec<f32>> {
        if phi.len() != psi.len() {
            return Err(Error::ShapeMismatch(format!(
                "style codes of length {} and {}",
                phi.len(),
                psi.len()
            )));
        }
        let (a, b) = (self.r1 as f32, (1.0 - self.r2) as f32);
        Ok(phi.iter().zip(psi).map(|(p, q)| a * p + b * q).collect())
    }
}

/// The automatic reference: everything outside the foreground.
pub fn default_reference(composite: &Image, fg_mask: &Mask) -> Result<Mask> {
    check_aligned(composite.dims(), fg_mask.dims())?;
    if fg_mask.support().is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok(fg_mask.invert())
}

/// Request resized to model resolution.
struct LowRes {
    composite: Image,
    fg: Mask,
    guide: Mask,
    used_default_reference: bool,
}

fn downsample(req: &HarmonizeRequest, model: &IphModel) -> Result<LowRes> {
    req.validate()?;
    let r = model.config().resolution;
    let (guide, used_default_reference) = match &req.guide_mask {
        Some(g) => (g.clone(), false),
        None => (default_reference(&req.composite, &req.fg_mask)?, true),
    };
    let fg = req.fg_mask.resize_binary(r, r)?;
    if fg.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let guide = guide.resize_binary(r, r)?;
    if guide.count() < MIN_REFERENCE_PIXELS {
        return Err(Error::ReferenceTooSmall {
            pixels: guide.count(),
            required: MIN_REFERENCE_PIXELS,
        });
    }
    Ok(LowRes {
        composite: resize(&req.composite, r, r, ResizeMethod::Bilinear)?,
        fg,
        guide,
        used_default_reference,
    })
}

/// Fits at the requested degree, or the highest degree the foreground has
/// enough low-resolution pixels for. Below four pixels only a mean shift is
/// fit.
fn fit_within_budget(src: &Image, dst: &Image, fg: &Mask, degree: usize) -> Result<ColorTransform> {
    let n = fg.count();
    if let Some(d) = (1..=degree).rev().find(|d| basis_len(*d) <= n) {
        return fit_color_transform(src, dst, fg, d);
    }
    let idx = fg.selected_indices();
    let mut t = ColorTransform::identity(1)?;
    let mut coefficients = t.coefficients().clone();
    for (c, row) in coefficients.iter_mut().enumerate() {
        row[0] = idx.iter().map(|&i| (dst.pixel(i)[c] - src.pixel(i)[c]) as f64).sum::<f64>() / n as f64;
    }
    t = ColorTransform::new(1, coefficients)?;
    t.degenerate = true;
    Ok(t)
}

fn finish(req: &HarmonizeRequest, model: &IphModel, low: &LowRes, code: &[f32]) -> Result<HarmonizeOutput> {
    let low_out = model.harmonize_image(&low.composite, &low.fg, code)?;
    let transform = fit_within_budget(&low.composite, &low_out, &low.fg, req.options.poly_degree)?;
    let recolored = apply_color_transform(&req.composite, &transform, &req.fg_mask.support())?;
    let image = alpha_composite(&recolored, &req.composite, &req.fg_mask)?;
    Ok(HarmonizeOutput {
        image,
        lowres: req.options.return_lowres.then_some(low_out),
        used_default_reference: low.used_default_reference,
        transform,
    })
}

/// Harmonizes the foreground of `req.composite` toward the guide region (or
/// the whole background when no guide is given).
pub fn harmonize(req: &HarmonizeRequest, model: &IphModel) -> Result<HarmonizeOutput> {
    let low = downsample(req, model)?;
    let code = model.style_code_of(&low.composite, &low.guide)?;
    finish(req, model, &low, &code)
}

/// Runs the same request under two different guide regions.
pub fn harmonize_with_region(req: &HarmonizeRequest, guide_a: &Mask, guide_b: &Mask, model: &IphModel) -> Result<(Image, Image)> {
    let mut a = req.clone();
    a.guide_mask = Some(guide_a.clone());
    let mut b = req.clone();
    b.guide_mask = Some(guide_b.clone());
    Ok((harmonize(&a, model)?.image, harmonize(&b, model)?.image))
}

/// Harmonizes under the blended code `r1·φ + (1−r2)·ψ`, with `φ` from the
/// harmonization model's encoder and `ψ` from the color model's encoder.
pub fn color_transfer(
    req: &HarmonizeRequest,
    ratios: BlendRatios,
    harmonize_model: &IphModel,
    color_model: &IphModel,
) -> Result<HarmonizeOutput> {
    ratios.validate()?;
    if harmonize_model.config().style_dim != color_model.config().style_dim {
        return Err(Error::ShapeMismatch(format!(
            "style dimensions differ: {} vs {}",
            harmonize_model.config().style_dim,
            color_model.config().style_dim
        )));
    }
    let low = downsample(req, harmonize_model)?;
    let phi = harmonize_model.style_code_of(&low.composite, &low.guide)?;
    let cr = color_model.config().resolution;
    let psi = if cr == harmonize_model.config().resolution {
        color_model.style_code_of(&low.composite, &low.guide)?
    } else {
        let guide = low.guide.resize_binary(cr, cr)?;
        color_model.style_code_of(&resize(&low.composite, cr, cr, ResizeMethod::Bilinear)?, &guide)?
    };
    let gamma = ratios.blend(&phi, &psi)?;
    finish(req, harmonize_model, &low, &gamma)
}
