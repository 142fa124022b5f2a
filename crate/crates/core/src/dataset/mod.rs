//! Synthetic interactive-harmonization data: augment one instance of a real
//! image to fabricate a composite and pick another instance as the guide.

pub mod augment;
pub mod sample;
pub mod store;
pub mod toy;

pub use augment::{Augmentation, BlendMode, LightingOverlay, Lut3d};
pub use sample::{build_sample, build_sample_with, derive_seed, CompositeSample, SampleMeta};
pub use store::{build_dataset, list_records, load_dataset, Annotations, Manifest, ManifestRecord};
