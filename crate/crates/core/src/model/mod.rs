//! Harmonization network, region style encoder and their weight archive.

pub mod archive;
pub mod config;
pub mod kernels;
pub mod layers;
pub mod networks;
pub mod params;

use std::collections::BTreeMap;

use candle_core::{Device, Tensor, Var};

pub use archive::{ArchiveMeta, LineageEntry, TensorData, WeightArchive};
pub use config::{ModelConfig, DEPTH, DOWNSAMPLE};
pub use networks::{Harmonizer, StyleEncoder};
pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::tensor::{image_to_tensor, mask_to_tensor, tensor_to_images};

/// Parameters whose names start with this prefix belong to optimizer state,
/// not to the model.
pub const OPTIM_PREFIX: &str = "optim.";

const OUTPUT_HEAD: [&str; 2] = ["harmonizer.head.conv2.weight", "harmonizer.head.conv2.bias"];

/// Harmonizer plus style encoder sharing one parameter store.
#[derive(Debug, Clone)]
pub struct IphModel {
    config: ModelConfig,
    params: ParamStore,
    harmonizer: Harmonizer,
    style_encoder: StyleEncoder,
}

impl IphModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed, Device::Cpu);
        let harmonizer = Harmonizer::new(&mut params, &config)?;
        let style_encoder = StyleEncoder::new(&mut params, &config)?;
        Ok(Self {
            config,
            params,
            harmonizer,
            style_encoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.params
            .vars()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// `(B, 3, H, W)` image and `(B, 1, H, W)` region to `(B, D)` codes.
    pub fn style_code(&self, image: &Tensor, region: &Tensor) -> Result<Tensor> {
        self.style_encoder.forward(image, region)
    }

    pub fn harmonize(&self, masked_fg: &Tensor, fg_mask: &Tensor, style: &Tensor) -> Result<Tensor> {
        self.harmonizer.forward(masked_fg, fg_mask, style)
    }

    /// Bottleneck activations of the harmonizer.
    pub fn latent(&self, masked_fg: &Tensor, fg_mask: &Tensor, style: &Tensor) -> Result<Tensor> {
        self.harmonizer.encode(masked_fg, fg_mask, style)
    }

    /// Style code of one region as a plain vector.
    pub fn style_code_of(&self, image: &Image, region: &Mask) -> Result<Vec<f32>> {
        if region.support().is_empty() {
            return Err(Error::EmptyReferenceRegion);
        }
        let code = self.style_code(&image_to_tensor(image, self.device())?, &mask_to_tensor(region, self.device())?)?;
        Ok(code.flatten_all()?.to_vec1()?)
    }

    /// Runs the harmonizer on one image at its own size, which must be a
    /// multiple of 16. Pixels outside `fg_mask` are zeroed before the pass.
    pub fn harmonize_image(&self, composite: &Image, fg_mask: &Mask, style: &[f32]) -> Result<Image> {
        if style.len() != self.config.style_dim {
            return Err(Error::ShapeMismatch(format!(
                "style code has length {}, model expects {}",
                style.len(),
                self.config.style_dim
            )));
        }
        let masked = composite.masked(fg_mask)?;
        let style = Tensor::from_slice(style, (1, style.len()), self.device())?;
        let out = self.harmonize(
            &image_to_tensor(&masked, self.device())?,
            &mask_to_tensor(fg_mask, self.device())?,
            &style,
        )?;
        Ok(tensor_to_images(&out)?.remove(0))
    }

    /// Zeroes the last output layer, making the harmonizer pass its input
    /// through (up to the logit clamp).
    pub fn zero_output_head(&self) -> Result<()> {
        for name in OUTPUT_HEAD {
            let var = self.params.get(name).expect("output head parameter");
            var.set(&var.as_tensor().zeros_like()?)?;
        }
        Ok(())
    }

    pub fn to_archive(&self, mut meta: ArchiveMeta) -> Result<WeightArchive> {
        meta.config = self.config.clone();
        meta.config_hash = self.config.hash();
        let mut tensors = BTreeMap::new();
        for (name, var) in self.params.vars() {
            tensors.insert(
                name.clone(),
                TensorData {
                    shape: var.dims().to_vec(),
                    data: var.as_tensor().flatten_all()?.to_vec1()?,
                },
            );
        }
        Ok(WeightArchive { meta, tensors })
    }

    /// Rebuilds a model from an archive. When `expected` is given the archive
    /// must carry exactly that configuration.
    pub fn from_archive(archive: &WeightArchive, expected: Option<&ModelConfig>) -> Result<Self> {
        let config = &archive.meta.config;
        if archive.meta.config_hash != config.hash() {
            return Err(Error::ConfigMismatch {
                archive: archive.meta.config_hash.clone(),
                expected: config.hash(),
            });
        }
        if let Some(exp) = expected {
            if exp.hash() != archive.meta.config_hash {
                return Err(Error::ConfigMismatch {
                    archive: archive.meta.config_hash.clone(),
                    expected: exp.hash(),
                });
            }
        }
        let model = Self::new(config.clone(), 0)?;
        model.load_parameters(archive)?;
        Ok(model)
    }

    /// Overwrites every parameter from `archive`, which must match this
    /// model's parameter set exactly (optimizer entries are ignored).
    pub fn load_parameters(&self, archive: &WeightArchive) -> Result<()> {
        for name in archive.tensors.keys() {
            if !name.starts_with(OPTIM_PREFIX) && self.params.get(name).is_none() {
                return Err(Error::ArchiveParam {
                    param: name.clone(),
                    reason: "not a parameter of this model".into(),
                });
            }
        }
        for (name, var) in self.params.vars() {
            let t = archive.tensors.get(name).ok_or_else(|| Error::ArchiveParam {
                param: name.clone(),
                reason: "missing from archive".into(),
            })?;
            if t.shape != var.dims() {
                return Err(Error::ArchiveParam {
                    param: name.clone(),
                    reason: format!("shape {:?}, expected {:?}", t.shape, var.dims()),
                });
            }
            var.set(&Tensor::from_slice(&t.data, t.shape.as_slice(), self.device())?)?;
        }
        Ok(())
    }

    pub fn save(&self, meta: ArchiveMeta, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_archive(meta)?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>, expected: Option<&ModelConfig>) -> Result<(Self, ArchiveMeta)> {
        let archive = WeightArchive::load(path)?;
        let model = Self::from_archive(&archive, expected)?;
        Ok((model, archive.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            style_dim: 8,
            base_channels: 4,
            res_blocks: 1,
            resolution: 32,
        }
    }

    fn rand_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.random::<f32>()).unwrap()
    }

    fn half_mask(h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| y >= h / 4 && y < 3 * h / 4 && x < w / 2).unwrap()
    }

    #[test]
    fn latent_is_one_sixteenth() {
        let model = IphModel::new(tiny(), 1).unwrap();
        let img = image_to_tensor(&rand_image(32, 48, 2), model.device()).unwrap();
        let m = mask_to_tensor(&half_mask(32, 48), model.device()).unwrap();
        let s = Tensor::zeros((1, 8), DType::F32, model.device()).unwrap();
        let z = model.latent(&img, &m, &s).unwrap();
        assert_eq!(z.dims4().unwrap(), (1, 64, 2, 3));
        let out = model.harmonize(&img, &m, &s).unwrap();
        assert_eq!(out.dims4().unwrap(), (1, 3, 32, 48));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let model = IphModel::new(tiny(), 1).unwrap();
        let img = rand_image(24, 32, 2);
        let err = model.harmonize_image(&img, &half_mask(24, 32), &[0.0; 8]);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn style_changes_output_and_forward_is_deterministic() {
        let model = IphModel::new(tiny(), 3).unwrap();
        let img = rand_image(32, 32, 4);
        let fg = half_mask(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s1: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s2: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = model.harmonize_image(&img, &fg, &s1).unwrap();
        let b = model.harmonize_image(&img, &fg, &s2).unwrap();
        let again = model.harmonize_image(&img, &fg, &s1).unwrap();
        assert_eq!(a, again);
        let l1: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(l1 > 0.0);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_head_passes_input_through() {
        let model = IphModel::new(tiny(), 3).unwrap();
        model.zero_output_head().unwrap();
        let img = rand_image(32, 32, 6).quantize();
        let fg = half_mask(32, 32);
        let out = model.harmonize_image(&img, &fg, &[0.3; 8]).unwrap();
        let masked = img.masked(&fg).unwrap();
        for (o, i) in out.data().iter().zip(masked.data()) {
            assert!((o - i).abs() <= 1.1e-4, "{o} vs {i}");
        }
    }

    #[test]
    fn style_code_ignores_pixels_outside_region() {
        let model = IphModel::new(tiny(), 7).unwrap();
        let region = half_mask(40, 36);
        let a = rand_image(40, 36, 8);
        let mut b = rand_image(40, 36, 9);
        b.map_pixels(|i, px| {
            if region.is_selected(i) {
                px.copy_from_slice(a.pixel(i));
            }
        });
        let ca = model.style_code_of(&a, &region).unwrap();
        let cb = model.style_code_of(&b, &region).unwrap();
        assert_eq!(ca.len(), 8);
        for (x, y) in ca.iter().zip(&cb) {
            assert!((x - y).abs() <= 1e-5);
        }
        assert_eq!(ca, model.style_code_of(&a, &region).unwrap());
    }

    #[test]
    fn empty_reference_region_is_an_error() {
        let model = IphModel::new(tiny(), 7).unwrap();
        let empty = Mask::filled(32, 32, 0.0).unwrap();
        let err = model.style_code_of(&rand_image(32, 32, 1), &empty).unwrap_err();
        assert_eq!(err.to_string(), "empty reference region");
    }

    #[test]
    fn archive_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ihw");
        let model = IphModel::new(tiny(), 11).unwrap();
        let mut meta = ArchiveMeta::new(model.config());
        meta.stage = 2;
        meta.step = 40;
        model.save(meta, &path).unwrap();
        let (loaded, meta) = IphModel::load(&path, Some(&tiny())).unwrap();
        assert_eq!((meta.stage, meta.step), (2, 40));
        for ((n1, v1), (n2, v2)) in model.vars().iter().zip(loaded.vars().iter()) {
            assert_eq!(n1, n2);
            let a: Vec<f32> = v1.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = v2.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{n1}");
        }
        let mut other = tiny();
        other.style_dim = 16;
        assert!(matches!(
            IphModel::load(&path, Some(&other)),
            Err(Error::ConfigMismatch { .. })
        ));
        let mut archive = model.to_archive(ArchiveMeta::new(model.config())).unwrap();
        archive.tensors.get_mut("style_encoder.pconv1.weight").unwrap().shape = vec![1, 2];
        let err = model.load_parameters(&archive).unwrap_err();
        assert!(err.to_string().contains("style_encoder.pconv1.weight"));
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let model = IphModel::new(tiny(), 13).unwrap();
        let dev = model.device().clone();
        let imgs: Vec<Image> = (0..2).map(|i| rand_image(32, 32, 20 + i)).collect();
        let fg = half_mask(32, 32);
        let guide = fg.invert();
        let img_t = crate::tensor::images_to_tensor(&[&imgs[0], &imgs[1]], &dev).unwrap();
        let fg_t = crate::tensor::masks_to_tensor(&[&fg, &fg], &dev).unwrap();
        let guide_t = crate::tensor::masks_to_tensor(&[&guide, &guide], &dev).unwrap();
        let style = model.style_code(&img_t, &guide_t).unwrap();
        let out = model.harmonize(&img_t.broadcast_mul(&fg_t).unwrap(), &fg_t, &style).unwrap();
        let target = img_t.affine(0.5, 0.2).unwrap();
        let loss = (out - target).unwrap().abs().unwrap().sum_all().unwrap();
        let loss = (loss + style.sqr().unwrap().sum(D::Minus1).unwrap().sum_all().unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in model.vars() {
            let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
            let norm: f32 = g.abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert!(norm > 0.0, "zero gradient for {name}");
        }
    }
}
