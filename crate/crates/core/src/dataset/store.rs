//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<id>/composite.png
//! <dir>/<id>/gt.png
//! <dir>/<id>/fg_mask.png
//! <dir>/<id>/guide_mask.png
//! ```
//!
//! Source images for synthesis are described by an annotation file listing
//! each image and its instance-mask PNGs, paths relative to the source dir.

use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::augment::Augmentation;
use super::sample::{build_sample, derive_seed, CompositeSample, SampleMeta};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMPOSITE_FILE: &str = "composite.png";
pub const GT_FILE: &str = "gt.png";
pub const FG_MASK_FILE: &str = "fg_mask.png";
pub const GUIDE_MASK_FILE: &str = "guide_mask.png";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub id: String,
    pub file: PathBuf,
    pub instances: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub images: Vec<AnnotatedImage>,
}

impl Annotations {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub source: String,
    pub augmentation: Option<Augmentation>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

fn load_source(src_dir: &Path, entry: &AnnotatedImage) -> Result<(Image, Vec<Mask>)> {
    let img = io::read_image(src_dir.join(&entry.file))?;
    let masks = entry
        .instances
        .iter()
        .map(|p| io::read_mask(src_dir.join(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok((img, masks))
}

pub fn record_id(index: usize) -> String {
    format!("{index:06}")
}

/// Synthesizes `count` records from the annotated sources, cycling through
/// sources in order. Sources that cannot be read or yield no valid mask pair
/// are skipped with a warning; fewer records are written only if every source
/// is unusable. Output depends only on the inputs and `seed`.
pub fn build_dataset(
    src_dir: impl AsRef<Path>,
    annotations: &Annotations,
    out_dir: impl AsRef<Path>,
    count: usize,
    seed: u64,
) -> Result<Manifest> {
    let src_dir = src_dir.as_ref();
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut usable = vec![true; annotations.images.len()];
    let mut cursor = 0usize;
    let mut cache: Option<(usize, Image, Vec<Mask>)> = None;
    let mut manifest = Manifest {
        seed,
        records: Vec::with_capacity(count),
    };

    'records: for index in 0..count {
        let record_seed = derive_seed(seed, index as u64);
        loop {
            if !usable.iter().any(|u| *u) {
                warn!("all sources exhausted after {index} records");
                break 'records;
            }
            let src_idx = cursor % usable.len();
            cursor += 1;
            if !usable[src_idx] {
                continue;
            }
            let entry = &annotations.images[src_idx];
            if cache.as_ref().map(|c| c.0) != Some(src_idx) {
                match load_source(src_dir, entry) {
                    Ok((img, masks)) => cache = Some((src_idx, img, masks)),
                    Err(e) => {
                        warn!("skipping source {}: {e}", entry.id);
                        usable[src_idx] = false;
                        continue;
                    }
                }
            }
            let (_, img, masks) = cache.as_ref().expect("cached source");
            match build_sample(img, masks, &entry.id, record_seed) {
                Ok(mut sample) => {
                    sample.meta.id = record_id(index);
                    write_sample(out_dir, &sample)?;
                    manifest.records.push(ManifestRecord {
                        id: sample.meta.id.clone(),
                        source: sample.meta.source.clone(),
                        augmentation: sample.meta.augmentation.clone(),
                        seed: record_seed,
                    });
                    continue 'records;
                }
                Err(e) => {
                    warn!("skipping source {}: {e}", entry.id);
                    usable[src_idx] = false;
                }
            }
        }
    }
    manifest.save(out_dir)?;
    Ok(manifest)
}

pub fn write_sample(out_dir: &Path, sample: &CompositeSample) -> Result<()> {
    let dir = out_dir.join(&sample.meta.id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    io::write_image(&sample.composite, dir.join(COMPOSITE_FILE))?;
    io::write_image(&sample.ground_truth, dir.join(GT_FILE))?;
    io::write_mask(&sample.fg_mask, dir.join(FG_MASK_FILE))?;
    io::write_mask(&sample.guide_mask, dir.join(GUIDE_MASK_FILE))?;
    Ok(())
}

/// Reads one record directory. The guide mask is optional on disk (for
/// externally curated test sets); when absent the whole background is used.
pub fn read_sample(dir: &Path, meta: SampleMeta) -> Result<CompositeSample> {
    let composite = io::read_image(dir.join(COMPOSITE_FILE))?;
    let ground_truth = io::read_image(dir.join(GT_FILE))?;
    let fg_mask = io::read_mask(dir.join(FG_MASK_FILE))?.binarize(0.5);
    let guide_path = dir.join(GUIDE_MASK_FILE);
    let guide_mask = if guide_path.exists() {
        io::read_mask(guide_path)?.binarize(0.5)
    } else {
        fg_mask.invert()
    };
    Ok(CompositeSample {
        composite,
        ground_truth,
        fg_mask,
        guide_mask,
        meta,
    })
}

/// Record ids of a dataset directory: from the manifest when present,
/// otherwise every subdirectory holding a composite, sorted by name.
pub fn list_records(dir: impl AsRef<Path>) -> Result<Vec<SampleMeta>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingDataset(dir.to_path_buf()));
    }
    if dir.join(MANIFEST_FILE).exists() {
        let manifest = Manifest::load(dir)?;
        return Ok(manifest
            .records
            .into_iter()
            .map(|r| SampleMeta {
                id: r.id,
                source: r.source,
                augmentation: r.augmentation,
                seed: r.seed,
            })
            .collect());
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().join(COMPOSITE_FILE).exists() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids
        .into_iter()
        .map(|id| SampleMeta {
            source: id.clone(),
            id,
            augmentation: None,
            seed: 0,
        })
        .collect())
}

/// Loads every readable record; unreadable ones are skipped with a warning.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<CompositeSample>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for meta in list_records(dir)? {
        let path = dir.join(&meta.id);
        match read_sample(&path, meta) {
            Ok(s) => out.push(s),
            Err(e) => warn!("skipping record {}: {e}", path.display()),
        }
    }
    Ok(out)
}
