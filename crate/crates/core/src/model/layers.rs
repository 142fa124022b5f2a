//! Building blocks shared by the harmonizer and the style encoder.

use candle_core::{Tensor, D};

use super::kernels;
use super::params::{Init, ParamStore};
use crate::error::Result;

/// Instance-norm denominator stabilizer.
pub const NORM_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(LEAK, 0.0)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init_scale: f64,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = params.create(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::Uniform {
                fan_in,
                scale: init_scale,
            },
        )?;
        let bias = params.create(&format!("{name}.bias"), &[c_out], Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = kernels::conv2d(x, &self.weight, self.padding, self.stride)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(params: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias_init: Vec<f32>) -> Result<Self> {
        let weight = params.create(
            &format!("{name}.weight"),
            &[d_out, d_in],
            Init::Uniform {
                fan_in: d_in,
                scale: 1.0,
            },
        )?;
        let bias = params.create(&format!("{name}.bias"), &[d_out], Init::Const(0.0))?;
        if !bias_init.is_empty() {
            let init = Tensor::from_vec(bias_init, d_out, params.device())?;
            params
                .get(&format!("{name}.bias"))
                .expect("bias just created")
                .set(&init)?;
        }
        Ok(Self { weight, bias })
    }

    /// `x` is `(B, d_in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// `x + conv2(lrelu(conv1(x)))`
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResBlock {
    pub fn new(params: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(params, &format!("{name}.conv1"), channels, channels, 3, 1, 1.0)?,
            conv2: Conv::new(params, &format!("{name}.conv2"), channels, channels, 3, 1, 0.5)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.conv1.forward(x)?)?;
        Ok((x + self.conv2.forward(&h)?)?)
    }
}

/// Mask-aware convolution.
///
/// With `S(M)` the mask mass inside a window and `|W|` the number of in-image
/// positions of that window, each output is
/// `W·(X⊙M) · |W| / S(M) + b` where `S(M) > 0`, and 0 elsewhere. The returned
/// mask is 1 exactly where `S(M) > 0`. Zero padding is not counted as a hole,
/// so an all-ones mask reproduces the ordinary zero-padded convolution.
///
/// `features` is `(B, C, H, W)`, `mask` is `(B, 1, H, W)`.
pub fn partial_conv(
    features: &Tensor,
    mask: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let (_, _, kh, kw) = weight.dims4()?;
    let dtype = features.dtype();
    let mask = mask.detach().to_dtype(dtype)?;
    let window = Tensor::ones((1, 1, kh, kw), dtype, features.device())?;
    let mass = mask.conv2d(&window, padding, stride, 1, 1)?;
    let extent = mask.ones_like()?.conv2d(&window, padding, stride, 1, 1)?;
    let valid = mass.gt(0.0)?.to_dtype(dtype)?;
    // Guard the division; invalid positions are zeroed by `valid` anyway.
    let ratio = (extent / mass.clamp(1e-8, f64::MAX)?)?.mul(&valid)?;

    let raw = kernels::conv2d(&features.broadcast_mul(&mask)?, weight, padding, stride)?;
    let mut out = raw.broadcast_mul(&ratio)?;
    if let Some(b) = bias {
        out = out.broadcast_add(&b.reshape((1, (), 1, 1))?)?;
    }
    let out = out.broadcast_mul(&valid)?;
    Ok((out, valid))
}

#[derive(Debug, Clone)]
pub struct PartialConv {
    conv: Conv,
}

impl PartialConv {
    pub fn new(params: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(params, name, c_in, c_out, kernel, stride, 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        partial_conv(
            x,
            mask,
            &self.conv.weight,
            Some(&self.conv.bias),
            self.conv.stride,
            self.conv.padding,
        )
    }
}

/// Per-channel instance normalization followed by the style affine:
/// `gamma * (x - mean) / (std + eps) + beta`, statistics over each channel's
/// spatial extent. `x` is `(B, C, h, w)`, `gamma`/`beta` are `(B, C)`.
pub fn adain(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let flat = x.flatten_from(2)?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    // The tiny offset keeps the sqrt derivative finite on constant channels.
    let std = (centered.sqr()?.mean_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    let normed = centered.broadcast_div(&(std + NORM_EPS)?)?;
    let out = normed
        .broadcast_mul(&gamma.reshape((b, c, 1))?)?
        .broadcast_add(&beta.reshape((b, c, 1))?)?;
    Ok(out.reshape(x.shape())?)
}

/// Learned affine map from the style code to per-channel `(gamma, beta)`.
#[derive(Debug, Clone)]
pub struct AdaInHead {
    linear: Linear,
    channels: usize,
}

impl AdaInHead {
    pub fn new(params: &mut ParamStore, name: &str, style_dim: usize, channels: usize) -> Result<Self> {
        let mut bias = vec![1.0f32; channels];
        bias.extend(std::iter::repeat(0.0).take(channels));
        Ok(Self {
            linear: Linear::new(params, name, style_dim, 2 * channels, bias)?,
            channels,
        })
    }

    pub fn params(&self, style: &Tensor) -> Result<(Tensor, Tensor)> {
        let gb = self.linear.forward(style)?;
        Ok((gb.narrow(1, 0, self.channels)?, gb.narrow(1, self.channels, self.channels)?))
    }

    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        let (gamma, beta) = self.params(style)?;
        adain(x, &gamma, &beta)
    }
}
