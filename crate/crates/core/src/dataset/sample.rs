use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::Augmentation;
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

/// Instance masks outside this coverage band are never picked.
pub const MIN_INSTANCE_COVERAGE: f64 = 0.005;
pub const MAX_INSTANCE_COVERAGE: f64 = 0.6;
/// Largest tolerated fg/guide overlap, as a fraction of the guide's pixels.
pub const MAX_PAIR_OVERLAP: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub source: String,
    pub augmentation: Option<Augmentation>,
    pub seed: u64,
}

/// One training/evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSample {
    pub composite: Image,
    pub ground_truth: Image,
    pub fg_mask: Mask,
    pub guide_mask: Mask,
    pub meta: SampleMeta,
}

impl CompositeSample {
    /// Checks the record invariants: aligned shapes, binary non-empty disjoint
    /// masks, and composite == ground truth (on the 8-bit grid) outside the
    /// foreground.
    pub fn check_invariants(&self) -> Result<()> {
        let dims = self.composite.dims();
        for (name, d) in [
            ("ground_truth", self.ground_truth.dims()),
            ("fg_mask", self.fg_mask.dims()),
            ("guide_mask", self.guide_mask.dims()),
        ] {
            if d != dims {
                return Err(Error::ShapeMismatch(format!("{name} is {d:?}, composite is {dims:?}")));
            }
        }
        for (name, m) in [("fg_mask", &self.fg_mask), ("guide_mask", &self.guide_mask)] {
            if m.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::InvalidArgument(format!("{name} is not binary")));
            }
            if m.is_empty() {
                return Err(Error::EmptyRegion);
            }
        }
        if self.fg_mask.intersect_count(&self.guide_mask) > 0 {
            return Err(Error::InvalidArgument("fg and guide masks overlap".into()));
        }
        let comp = self.composite.to_u8();
        let gt = self.ground_truth.to_u8();
        let c = self.composite.channels();
        for i in 0..self.fg_mask.data().len() {
            if !self.fg_mask.is_selected(i) && comp[i * c..(i + 1) * c] != gt[i * c..(i + 1) * c] {
                return Err(Error::InvalidArgument(format!(
                    "composite differs from ground truth outside the foreground at pixel {i}"
                )));
            }
        }
        Ok(())
    }
}

/// SplitMix64 step; derives independent per-record seeds from a master seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn eligible(mask: &Mask) -> bool {
    let cov = mask.coverage();
    (MIN_INSTANCE_COVERAGE..=MAX_INSTANCE_COVERAGE).contains(&cov)
}

/// All usable (fg index, guide index) pairs among the instance masks.
pub fn candidate_pairs(instances: &[Mask]) -> Vec<(usize, usize)> {
    let binary: Vec<Mask> = instances.iter().map(|m| m.binarize(0.5)).collect();
    let ok: Vec<usize> = (0..binary.len()).filter(|i| eligible(&binary[*i])).collect();
    let mut pairs = Vec::new();
    for &f in &ok {
        for &g in &ok {
            if f == g || binary[f].dims() != binary[g].dims() {
                continue;
            }
            let overlap = binary[f].intersect_count(&binary[g]);
            let guide = binary[g].count();
            if (overlap as f64) <= MAX_PAIR_OVERLAP * guide as f64 && overlap < guide {
                pairs.push((f, g));
            }
        }
    }
    pairs
}

/// Picks a foreground and a distinct guide instance at random, augments the
/// foreground of a copy of `src`, and pairs it with the untouched original.
pub fn build_sample(src: &Image, instances: &[Mask], source: &str, seed: u64) -> Result<CompositeSample> {
    build_sample_inner(src, instances, source, seed, None)
}

/// As [`build_sample`] but with a fixed augmentation instead of a random one.
pub fn build_sample_with(
    src: &Image,
    instances: &[Mask],
    source: &str,
    seed: u64,
    augmentation: Augmentation,
) -> Result<CompositeSample> {
    build_sample_inner(src, instances, source, seed, Some(augmentation))
}

fn build_sample_inner(
    src: &Image,
    instances: &[Mask],
    source: &str,
    seed: u64,
    forced: Option<Augmentation>,
) -> Result<CompositeSample> {
    if instances.len() < 2 {
        return Err(Error::UnusableImage(format!("{source}: fewer than two instance masks")));
    }
    if instances.iter().any(|m| m.dims() != src.dims()) {
        return Err(Error::UnusableImage(format!("{source}: instance mask size differs from image")));
    }
    let pairs = candidate_pairs(instances);
    if pairs.is_empty() {
        return Err(Error::UnusableImage(format!("{source}: no valid foreground/guide pair")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fgs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    fgs.dedup();
    let fg = fgs[rng.random_range(0..fgs.len())];
    let guides: Vec<usize> = pairs.iter().filter(|p| p.0 == fg).map(|p| p.1).collect();
    let guide = guides[rng.random_range(0..guides.len())];

    let fg_mask = instances[fg].binarize(0.5);
    let guide_mask = instances[guide].binarize(0.5).subtract(&fg_mask)?;
    let augmentation = match forced {
        Some(a) => a,
        None => Augmentation::sample(&mut rng),
    };
    let ground_truth = src.quantize();
    let composite = augmentation.apply(&ground_truth, &fg_mask)?.quantize();
    Ok(CompositeSample {
        composite,
        ground_truth,
        fg_mask,
        guide_mask,
        meta: SampleMeta {
            id: String::new(),
            source: source.to_string(),
            augmentation: Some(augmentation),
            seed,
        },
    })
}
