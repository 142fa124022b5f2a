//! CPU kernels for the hot spots of the networks.
//!
//! Convolution runs as patch extraction plus one batched matmul, which is
//! several times faster than candle's direct kernel for the small channel
//! counts used here, mostly in the backward pass.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_size(&self) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(self.height), o(self.width))
    }

    /// Calls `f(image_index, column_index)` for every in-image tap of one sample.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_size();
        let k = self.kernel;
        let p = self.padding as isize;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let img_row = (c * self.height + iy as usize) * self.width;
                        let col_row = (row * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - p;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(img_row + ix as usize, col_row + ox);
                        }
                    }
                }
            }
        }
    }

    fn col_len(&self) -> usize {
        let (ho, wo) = self.out_size();
        self.channels * self.kernel * self.kernel * ho * wo
    }

    fn img_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

fn gather<T: Copy + Default>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let (il, cl) = (g.img_len(), g.col_len());
    let mut out = vec![T::default(); batch * cl];
    for b in 0..batch {
        let (s, d) = (&src[b * il..(b + 1) * il], &mut out[b * cl..(b + 1) * cl]);
        g.for_each_tap(|i, j| d[j] = s[i]);
    }
    out
}

fn scatter<T: Copy + Default + std::ops::AddAssign>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let (il, cl) = (g.img_len(), g.col_len());
    let mut out = vec![T::default(); batch * il];
    for b in 0..batch {
        let (s, d) = (&src[b * cl..(b + 1) * cl], &mut out[b * il..(b + 1) * il]);
        g.for_each_tap(|i, j| d[i] += s[j]);
    }
    out
}

/// `(B, C, H, W)` to `(B, C·k·k, Ho·Wo)`.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: sums patch columns back onto the image grid.
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let (ho, wo) = g.out_size();
        let shape = Shape::from((batch, g.channels * g.kernel * g.kernel, ho * wo));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(contiguous(v, layout)?, batch, g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(contiguous(v, layout)?, batch, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Zero-padded 2-D cross-correlation, same semantics as `Tensor::conv2d`
/// with unit dilation and one group. `x` is `(B, C, H, W)`, `weight` is
/// `(O, C, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, _, k, _) = weight.dims4()?;
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
    };
    let (ho, wo) = g.out_size();
    let cols = if k == 1 && stride == 1 && padding == 0 {
        x.reshape((b, c, h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(g))?
    };
    let wm = weight.reshape((1, o, c * k * k))?.broadcast_as((b, o, c * k * k))?.contiguous()?;
    Ok(wm.matmul(&cols)?.reshape((b, o, ho, wo))?)
}

/// Nearest-neighbour ×2 upsampling of `(B, C, H, W)`.
struct Upsample2;

/// Adjoint of [`Upsample2`]: sums each 2×2 block.
struct SumPool2;

fn upsample2<T: Copy + Default>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); planes * 4 * h * w];
    for (p, plane) in src.chunks_exact(h * w).enumerate().take(planes) {
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                let o = 2 * y * 2 * w + 2 * x;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + 2 * w] = v;
                dst[o + 2 * w + 1] = v;
            }
        }
    }
    out
}

fn sum_pool2<T: Copy + Default + std::ops::Add<Output = T>>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::default(); planes * ho * wo];
    for (p, plane) in src.chunks_exact(h * w).enumerate().take(planes) {
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let o = 2 * y * w + 2 * x;
                dst[y * wo + x] = plane[o] + plane[o + 1] + plane[o + w] + plane[o + w + 1];
            }
        }
    }
    out
}

fn dims4(layout: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    match layout.dims() {
        &[b, c, h, w] => Ok((b * c, h, w)),
        d => candle_core::bail!("expected a 4-d tensor, got {d:?}"),
    }
}

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (planes, h, w) = dims4(layout)?;
        let d = layout.dims();
        let shape = Shape::from((d[0], d[1], 2 * h, 2 * w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(upsample2(contiguous(v, layout)?, planes, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(upsample2(contiguous(v, layout)?, planes, h, w)),
            _ => candle_core::bail!("upsample2 supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(SumPool2)?))
    }
}

impl CustomOp1 for SumPool2 {
    fn name(&self) -> &'static str {
        "sum_pool2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (planes, h, w) = dims4(layout)?;
        if h % 2 != 0 || w % 2 != 0 {
            candle_core::bail!("sum_pool2 needs even sizes, got {h}x{w}");
        }
        let d = layout.dims();
        let shape = Shape::from((d[0], d[1], h / 2, w / 2));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(sum_pool2(contiguous(v, layout)?, planes, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(sum_pool2(contiguous(v, layout)?, planes, h, w)),
            _ => candle_core::bail!("sum_pool2 supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Upsample2)?))
    }
}

/// Nearest-neighbour ×2 upsampling, same values as `upsample_nearest2d(2h, 2w)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2)?)
}
