//! Conversions between [`Image`]/[`Mask`] and NCHW tensors.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

/// Stacks same-sized images into a `(B, C, H, W)` f32 tensor.
pub fn images_to_tensor(images: &[&Image], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height(), img.width(), img.channels()) != (h, w, c) {
            return Err(Error::ShapeMismatch("images in a batch must share a shape".into()));
        }
        data.extend(img.to_planar());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?)
}

pub fn image_to_tensor(image: &Image, device: &Device) -> Result<Tensor> {
    images_to_tensor(&[image], device)
}

/// Stacks masks into a `(B, 1, H, W)` f32 tensor.
pub fn masks_to_tensor(masks: &[&Mask], device: &Device) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty mask batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dims() != (h, w) {
            return Err(Error::ShapeMismatch("masks in a batch must share a shape".into()));
        }
        data.extend_from_slice(m.data());
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?)
}

pub fn mask_to_tensor(mask: &Mask, device: &Device) -> Result<Tensor> {
    masks_to_tensor(&[mask], device)
}

/// Splits a `(B, C, H, W)` tensor back into images, clamping into `[0, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    flat.chunks(c * h * w)
        .take(b)
        .map(|chunk| Image::from_planar(h, w, c, chunk))
        .collect()
}
