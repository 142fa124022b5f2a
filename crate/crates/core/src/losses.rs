//! Training objective: luminance matching, style-code consistency,
//! harmonization L1 and the two style triplets.
//!
//! All functions take batched tensors: images `(B, 3, H, W)`, masks
//! `(B, 1, H, W)`, style codes `(B, D)`. Per-sample terms are averaged over
//! the batch. Any float dtype works; gradient checks run in f64.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::percentile_ranks;

/// Offset inside the triplet norms, keeping their derivative finite when two
/// codes coincide.
const NORM_FLOOR: f64 = 1e-12;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    pub margin: f64,
    pub p_hi: f64,
    pub p_lo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 1.0,
            beta: 0.01,
            margin: 0.1,
            p_hi: 90.0,
            p_lo: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.lambda, self.beta];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("triplet margin must be positive".into()));
        }
        if !(0.0 <= self.p_lo && self.p_lo < self.p_hi && self.p_hi <= 100.0) {
            return Err(Error::Config("percentiles need 0 <= p_lo < p_hi <= 100".into()));
        }
        Ok(())
    }
}

/// Scalar values of every term for one step, serialized as one JSON line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub harmonization: f64,
    pub highlight: f64,
    pub mid_tone: f64,
    pub shadow: f64,
    pub lm: f64,
    pub consistency: f64,
    pub triplet1: f64,
    pub triplet2: f64,
    pub total: f64,
}

impl LossReport {
    /// Fills `lm` and `total` from the components.
    pub fn recompose(mut self, w: &LossWeights) -> Self {
        self.lm = self.highlight + self.mid_tone + self.shadow;
        self.total = self.harmonization
            + w.alpha * self.lm
            + w.lambda * self.consistency
            + w.beta * (self.triplet1 + self.triplet2);
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// The three luminance statistics terms and their sum.
#[derive(Debug, Clone)]
pub struct LmTerms {
    pub highlight: Tensor,
    pub mid_tone: Tensor,
    pub shadow: Tensor,
    pub lm: Tensor,
}

/// Rec. 601 luma, `(B, 3, H, W)` to `(B, 1, H, W)`.
pub fn luminance(img: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = img.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("luminance needs 3 channels, got {c}")));
    }
    let w = Tensor::new(&LUMA, img.device())?
        .to_dtype(img.dtype())?
        .reshape((1, 3, 1, 1))?;
    Ok(img.broadcast_mul(&w)?.sum_keepdim(1)?)
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Percentile `p` of a 1-D tensor by linear interpolation between order
/// statistics at rank `p/100·(n−1)`. The gradient reaches exactly the (at most
/// two) interpolated elements; ties are broken by position.
fn percentile(values: &Tensor, p: f64) -> Result<Tensor> {
    let host: Vec<f64> = values.to_dtype(candle_core::DType::F64)?.to_vec1()?;
    let mut order: Vec<u32> = (0..host.len() as u32).collect();
    order.sort_by(|a, b| host[*a as usize].total_cmp(&host[*b as usize]).then(a.cmp(b)));
    let (lo, hi, frac) = percentile_ranks(host.len(), p);
    let idx = Tensor::new(&[order[lo], order[hi]], values.device())?;
    let picked = values.index_select(&idx, 0)?;
    let w = Tensor::new(&[1.0 - frac, frac], values.device())?.to_dtype(values.dtype())?;
    Ok((picked * w)?.sum_all()?)
}

fn selected_positions(mask: &Tensor) -> Result<Vec<Vec<u32>>> {
    let (b, _, _, _) = mask.dims4()?;
    let flat: Vec<f64> = mask.to_dtype(candle_core::DType::F64)?.flatten_from(1)?.to_vec2()?.concat();
    let n = flat.len() / b.max(1);
    (0..b)
        .map(|i| {
            let sel: Vec<u32> = (0..n)
                .filter(|j| flat[i * n + j] > 0.5)
                .map(|j| j as u32)
                .collect();
            if sel.is_empty() {
                Err(Error::EmptyRegion)
            } else {
                Ok(sel)
            }
        })
        .collect()
}

/// Highlight, mid-tone and shadow differences between `pred` and `gt`,
/// measured on luminance inside `fg_mask`.
pub fn luminance_matching_loss(pred: &Tensor, gt: &Tensor, fg_mask: &Tensor, w: &LossWeights) -> Result<LmTerms> {
    check_same(pred, gt, "prediction and ground truth")?;
    let (b, _, h, wd) = pred.dims4()?;
    if fg_mask.dims4()? != (b, 1, h, wd) {
        return Err(Error::ShapeMismatch("foreground mask does not match the image batch".into()));
    }
    let positions = selected_positions(fg_mask)?;
    let lp = luminance(pred)?.flatten_from(1)?;
    let lg = luminance(gt)?.flatten_from(1)?;
    let (mut hi, mut mid, mut lo) = (Vec::new(), Vec::new(), Vec::new());
    for (i, sel) in positions.iter().enumerate() {
        let idx = Tensor::new(sel.as_slice(), pred.device())?;
        let vp = lp.get(i)?.index_select(&idx, 0)?;
        let vg = lg.get(i)?.index_select(&idx, 0)?;
        hi.push((percentile(&vp, w.p_hi)? - percentile(&vg, w.p_hi)?)?.abs()?);
        mid.push((vp.mean_all()? - vg.mean_all()?)?.abs()?);
        lo.push((percentile(&vp, w.p_lo)? - percentile(&vg, w.p_lo)?)?.abs()?);
    }
    let mean = |v: Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::stack(&v, 0)?.mean_all()?) };
    let highlight = mean(hi)?;
    let mid_tone = mean(mid)?;
    let shadow = mean(lo)?;
    let lm = ((&highlight + &mid_tone)? + &shadow)?;
    Ok(LmTerms {
        highlight,
        mid_tone,
        shadow,
        lm,
    })
}

fn check_codes(codes: &[&Tensor]) -> Result<()> {
    let first = codes[0].dims2()?;
    for c in &codes[1..] {
        if c.dims2()? != first {
            return Err(Error::ShapeMismatch(format!(
                "style codes {:?} vs {:?}",
                first,
                c.dims2()?
            )));
        }
    }
    Ok(())
}

/// Mean absolute difference between two style codes.
pub fn consistency_loss(code_h: &Tensor, code_b: &Tensor) -> Result<Tensor> {
    check_codes(&[code_h, code_b])?;
    Ok((code_h - code_b)?.abs()?.mean_all()?)
}

/// Mean absolute error over every pixel and channel.
pub fn harmonization_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(pred, gt, "prediction and ground truth")?;
    Ok((pred - gt)?.abs()?.mean_all()?)
}

fn l2(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(((a - b)?.sqr()?.sum(D::Minus1)? + NORM_FLOOR)?.sqrt()?)
}

/// `t1 = max(|h−b| − |h−c| + m, 0)`, `t2 = max(|h−r| − |h−c| + m, 0)`.
pub fn triplet_losses(code_h: &Tensor, code_b: &Tensor, code_c: &Tensor, code_r: &Tensor, margin: f64) -> Result<(Tensor, Tensor)> {
    check_codes(&[code_h, code_b, code_c, code_r])?;
    let neg = l2(code_h, code_c)?;
    let t1 = ((l2(code_h, code_b)? - &neg)? + margin)?.relu()?.mean_all()?;
    let t2 = ((l2(code_h, code_r)? - &neg)? + margin)?.relu()?.mean_all()?;
    Ok((t1, t2))
}

/// Everything the objective looks at for one batch.
#[derive(Debug, Clone)]
pub struct LossInputs<'a> {
    pub pred: &'a Tensor,
    pub gt: &'a Tensor,
    pub fg_mask: &'a Tensor,
    /// Harmonized foreground.
    pub code_h: &'a Tensor,
    /// Reference region.
    pub code_b: &'a Tensor,
    /// Composite foreground.
    pub code_c: &'a Tensor,
    /// Real foreground.
    pub code_r: &'a Tensor,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Weighted objective and the per-term report.
pub fn total_loss(inputs: &LossInputs<'_>, w: &LossWeights) -> Result<(Tensor, LossReport)> {
    w.validate()?;
    let harm = harmonization_loss(inputs.pred, inputs.gt)?;
    let lm = luminance_matching_loss(inputs.pred, inputs.gt, inputs.fg_mask, w)?;
    let consis = consistency_loss(inputs.code_h, inputs.code_b)?;
    let (t1, t2) = triplet_losses(inputs.code_h, inputs.code_b, inputs.code_c, inputs.code_r, w.margin)?;
    let total = (((&harm + lm.lm.affine(w.alpha, 0.0)?)? + consis.affine(w.lambda, 0.0)?)?
        + (&t1 + &t2)?.affine(w.beta, 0.0)?)?;
    let report = LossReport {
        harmonization: scalar(&harm)?,
        highlight: scalar(&lm.highlight)?,
        mid_tone: scalar(&lm.mid_tone)?,
        shadow: scalar(&lm.shadow)?,
        consistency: scalar(&consis)?,
        triplet1: scalar(&t1)?,
        triplet2: scalar(&t2)?,
        ..Default::default()
    }
    .recompose(w);
    Ok((total, report))
}
