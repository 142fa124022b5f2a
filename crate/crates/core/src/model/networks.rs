use candle_core::{Tensor, D};

use super::config::{ModelConfig, DEPTH};
use super::kernels;
use super::layers::{leaky_relu, sigmoid, AdaInHead, Conv, Linear, PartialConv, ResBlock};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Inputs are clamped this far inside `(0, 1)` before the logit.
pub const LOGIT_EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
struct EncoderBlock {
    down: Conv,
    res: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    conv: Conv,
    adain: AdaInHead,
    res: Vec<ResBlock>,
}

/// Encoder-decoder that re-renders the masked foreground under a style code.
///
/// Input is the masked foreground (3), the foreground mask (1) and a 3-channel
/// spatial broadcast of a learned projection of the style code. Four strided
/// conv blocks reach `H/16 × W/16`; four upsampling blocks, each with its own
/// AdaIN head, come back up. A pointwise head looks at the decoder features
/// next to the input pixels and predicts a per-pixel correction that is added
/// to the input in logit space, so a zero head reproduces the input.
#[derive(Debug, Clone)]
pub struct Harmonizer {
    style_proj: Linear,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    head1: Conv,
    head2: Conv,
}

impl Harmonizer {
    pub fn new(params: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let style_proj = Linear::new(params, "harmonizer.style_proj", cfg.style_dim, 3, vec![])?;
        let mut encoder = Vec::with_capacity(DEPTH);
        let mut c_in = 7;
        for k in 1..=DEPTH {
            let c_out = cfg.encoder_channels(k);
            let name = format!("harmonizer.encoder.block{k}");
            let down = Conv::new(params, &format!("{name}.down"), c_in, c_out, 3, 2, 1.0)?;
            let res = (1..=cfg.res_blocks)
                .map(|r| ResBlock::new(params, &format!("{name}.res{r}"), c_out))
                .collect::<Result<_>>()?;
            encoder.push(EncoderBlock { down, res });
            c_in = c_out;
        }
        let mut decoder = Vec::with_capacity(DEPTH);
        for k in 1..=DEPTH {
            let c_out = cfg.encoder_channels(DEPTH - k);
            let name = format!("harmonizer.decoder.block{k}");
            let conv = Conv::new(params, &format!("{name}.conv"), c_in, c_out, 3, 1, 1.0)?;
            let adain = AdaInHead::new(params, &format!("{name}.adain"), cfg.style_dim, c_out)?;
            let res = (1..=cfg.res_blocks)
                .map(|r| ResBlock::new(params, &format!("{name}.res{r}"), c_out))
                .collect::<Result<_>>()?;
            decoder.push(DecoderBlock { conv, adain, res });
            c_in = c_out;
        }
        let head1 = Conv::new(params, "harmonizer.head.conv1", c_in + 3, c_in, 1, 1, 1.0)?;
        let head2 = Conv::new(params, "harmonizer.head.conv2", c_in, 3, 1, 1, 0.1)?;
        Ok(Self {
            style_proj,
            encoder,
            decoder,
            head1,
            head2,
        })
    }

    fn check_input(masked_fg: &Tensor, fg_mask: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = masked_fg.dims4()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("harmonizer expects 3 image channels, got {c}")));
        }
        if fg_mask.dims4()? != (b, 1, h, w) {
            return Err(Error::ShapeMismatch("foreground mask does not match the image batch".into()));
        }
        let div = 1 << DEPTH;
        if h % div != 0 || w % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} is not divisible by {div}"
            )));
        }
        Ok((b, h, w))
    }

    /// Encoder output, `(B, C, H/16, W/16)`.
    pub fn encode(&self, masked_fg: &Tensor, fg_mask: &Tensor, style: &Tensor) -> Result<Tensor> {
        let (b, h, w) = Self::check_input(masked_fg, fg_mask)?;
        let proj = self
            .style_proj
            .forward(style)?
            .reshape((b, 3, 1, 1))?
            .broadcast_as((b, 3, h, w))?;
        let mut x = Tensor::cat(&[masked_fg, fg_mask, &proj], 1)?;
        for block in &self.encoder {
            x = leaky_relu(&block.down.forward(&x)?)?;
            for r in &block.res {
                x = r.forward(&x)?;
            }
        }
        Ok(x)
    }

    /// Harmonized foreground in `(0, 1)`, same spatial size as the input.
    pub fn forward(&self, masked_fg: &Tensor, fg_mask: &Tensor, style: &Tensor) -> Result<Tensor> {
        let mut x = self.encode(masked_fg, fg_mask, style)?;
        for block in &self.decoder {
            x = kernels::upsample2x(&x)?;
            x = block.conv.forward(&x)?;
            x = leaky_relu(&block.adain.forward(&x, style)?)?;
            for r in &block.res {
                x = r.forward(&x)?;
            }
        }
        let features = Tensor::cat(&[&x, masked_fg], 1)?;
        let delta = self.head2.forward(&leaky_relu(&self.head1.forward(&features)?)?)?;
        let p = masked_fg.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS)?;
        let logit = (p.log()? - (1.0 - &p)?.log()?)?;
        sigmoid(&(logit + delta)?)
    }
}

/// Partial-convolution encoder summarizing a masked region as a `D`-vector.
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    layers: Vec<PartialConv>,
}

impl StyleEncoder {
    pub fn new(params: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let widths = [
            3,
            cfg.base_channels,
            2 * cfg.base_channels,
            4 * cfg.base_channels,
            cfg.style_dim,
        ];
        let layers = (0..DEPTH)
            .map(|i| {
                PartialConv::new(
                    params,
                    &format!("style_encoder.pconv{}", i + 1),
                    widths[i],
                    widths[i + 1],
                    3,
                    2,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `image` is `(B, 3, H, W)` in `[0, 1]`, `region` is `(B, 1, H, W)`.
    /// Returns `(B, D)`.
    pub fn forward(&self, image: &Tensor, region: &Tensor) -> Result<Tensor> {
        let mass: Vec<f32> = region.flatten_from(1)?.sum(1)?.to_vec1()?;
        if mass.iter().any(|m| *m <= 0.0) {
            return Err(Error::EmptyReferenceRegion);
        }
        let mut x = image.affine(2.0, -1.0)?;
        let mut m = region.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, m2) = layer.forward(&x, &m)?;
            x = if i == last { y } else { leaky_relu(&y)? };
            m = m2;
        }
        // Average over valid positions only.
        let num = x.broadcast_mul(&m)?.flatten_from(2)?.sum(D::Minus1)?;
        let den = m.flatten_from(2)?.sum(D::Minus1)?;
        Ok(num.broadcast_div(&den)?)
    }
}
