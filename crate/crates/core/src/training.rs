//! Stage-wise training: batch assembly, Adam, checkpoints and the curriculum.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, list_records, CompositeSample, SampleMeta};
use crate::dataset::store::read_sample;
use crate::error::{Error, Result};
use crate::imaging::{resize, ResizeMethod};
use crate::losses::{total_loss, LossInputs, LossReport, LossWeights};
use crate::model::{ArchiveMeta, IphModel, LineageEntry, ModelConfig, WeightArchive, OPTIM_PREFIX};
use crate::tensor::{images_to_tensor, masks_to_tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub fn default_learning_rate(stage: u8) -> f64 {
    match stage {
        1 => 1e-4,
        2 => 1e-5,
        _ => 1e-6,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub dataset: PathBuf,
    /// Defaults to 1e-4, 1e-5, 1e-6 for stages 1, 2, 3.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "StageConfig::default_batch")]
    pub batch_size: usize,
    pub steps: u64,
    #[serde(default = "StageConfig::default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// JSON-lines loss log.
    #[serde(default)]
    pub log: Option<PathBuf>,
    /// Stage 1 only: keep the consistency and triplet terms (with the whole
    /// background as reference). When false they are dropped for stage 1.
    #[serde(default = "StageConfig::default_true")]
    pub stage1_style_losses: bool,
    /// Architecture for a fresh stage-1 model; ignored when resuming.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Largest scene exposure change, in stops, applied to each loaded sample
    /// (see [`jitter_exposure`]). On small sets this keeps the harmonizer from
    /// memorizing each foreground's target instead of reading the reference.
    /// 0 disables it.
    #[serde(default)]
    pub exposure_jitter: f64,
}

impl StageConfig {
    fn default_batch() -> usize {
        48
    }

    fn default_resolution() -> usize {
        256
    }

    fn default_true() -> bool {
        true
    }

    pub fn new(stage: u8, dataset: impl Into<PathBuf>, steps: u64) -> Self {
        Self {
            stage,
            dataset: dataset.into(),
            learning_rate: None,
            batch_size: Self::default_batch(),
            steps,
            resolution: Self::default_resolution(),
            loss: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            log: None,
            stage1_style_losses: true,
            model: None,
            exposure_jitter: 0.0,
        }
    }

    /// Desk-scale settings used with [`ModelConfig::toy`]: batch 8 at 64×64,
    /// 500 steps at 3e-4 with half a stop of exposure jitter for stage 1, and
    /// 300 steps at 1e-4 without jitter afterwards.
    pub fn toy(stage: u8, dataset: impl Into<PathBuf>) -> Self {
        let (steps, lr, jitter) = if stage == 1 { (500, 3e-4, 0.5) } else { (300, 1e-4, 0.0) };
        Self {
            learning_rate: Some(lr),
            exposure_jitter: jitter,
            batch_size: 8,
            resolution: ModelConfig::toy().resolution,
            model: Some(ModelConfig::toy()),
            ..Self::new(stage, dataset, steps)
        }
    }

    /// Parses a JSON document, or TOML when the path ends in `.toml`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or_else(|| default_learning_rate(self.stage))
    }

    /// Loss weights in effect for this stage.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss;
        if self.stage == 1 && !self.stage1_style_losses {
            w.lambda = 0.0;
            w.beta = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.exposure_jitter >= 0.0 && self.exposure_jitter.is_finite()) {
            return Err(Error::Config("exposure jitter must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.resolution == 0 || self.resolution % crate::model::DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not a positive multiple of {}",
                self.resolution,
                crate::model::DOWNSAMPLE
            )));
        }
        self.loss.validate()
    }
}

/// Tensors for one optimizer step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub composite: Tensor,
    pub ground_truth: Tensor,
    pub fg_mask: Tensor,
    /// Region the style encoder summarizes as the reference.
    pub guide_mask: Tensor,
    /// Harmonizer input: composite with everything outside the foreground set
    /// to 0.
    pub masked_fg: Tensor,
}

/// Resizes the samples to the stage resolution and stacks them. Samples whose
/// foreground or reference region vanishes are skipped with a warning.
pub fn make_batch(samples: &[CompositeSample], cfg: &StageConfig) -> Result<Batch> {
    let r = cfg.resolution;
    let (mut ids, mut comps, mut gts, mut fgs, mut guides) = (vec![], vec![], vec![], vec![], vec![]);
    for s in samples {
        let fg = s.fg_mask.resize_binary(r, r)?;
        let guide = if cfg.stage == 1 {
            fg.invert()
        } else {
            s.guide_mask.resize_binary(r, r)?
        };
        if fg.is_empty() || guide.is_empty() {
            warn!("skipping sample {}: empty mask at {r}x{r}", s.meta.id);
            continue;
        }
        ids.push(s.meta.id.clone());
        comps.push(resize(&s.composite, r, r, ResizeMethod::Bilinear)?);
        gts.push(resize(&s.ground_truth, r, r, ResizeMethod::Bilinear)?);
        fgs.push(fg);
        guides.push(guide);
    }
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no usable samples in batch".into()));
    }
    let dev = candle_core::Device::Cpu;
    let composite = images_to_tensor(&comps.iter().collect::<Vec<_>>(), &dev)?;
    let ground_truth = images_to_tensor(&gts.iter().collect::<Vec<_>>(), &dev)?;
    let fg_mask = masks_to_tensor(&fgs.iter().collect::<Vec<_>>(), &dev)?;
    let guide_mask = masks_to_tensor(&guides.iter().collect::<Vec<_>>(), &dev)?;
    let masked_fg = composite.broadcast_mul(&fg_mask)?;
    Ok(Batch {
        ids,
        composite,
        ground_truth,
        fg_mask,
        guide_mask,
        masked_fg,
    })
}

/// Forward pass and objective for one batch.
pub fn batch_loss(model: &IphModel, batch: &Batch, w: &LossWeights) -> Result<(Tensor, LossReport)> {
    let code_b = model.style_code(&batch.composite, &batch.guide_mask)?;
    let out = model.harmonize(&batch.masked_fg, &batch.fg_mask, &code_b)?;
    // Only the foreground is predicted; the background is the composite's.
    let bg = (1.0 - &batch.fg_mask)?;
    let pred = (out.broadcast_mul(&batch.fg_mask)? + batch.composite.broadcast_mul(&bg)?)?;
    let code_h = model.style_code(&pred, &batch.fg_mask)?;
    let code_c = model.style_code(&batch.composite, &batch.fg_mask)?;
    let code_r = model.style_code(&batch.ground_truth, &batch.fg_mask)?;
    total_loss(
        &LossInputs {
            pred: &pred,
            gt: &batch.ground_truth,
            fg_mask: &batch.fg_mask,
            code_h: &code_h,
            code_b: &code_b,
            code_c: &code_c,
            code_r: &code_r,
        },
        w,
    )
}

/// Adam with bias correction; moments keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn step(&mut self, model: &IphModel, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, var) in model.vars() {
            let theta = var.as_tensor().detach();
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => theta.zeros_like()?,
            };
            let m_prev = match self.m.get(&name) {
                Some(m) => m.clone(),
                None => theta.zeros_like()?,
            };
            let v_prev = match self.v.get(&name) {
                Some(v) => v.clone(),
                None => theta.zeros_like()?,
            };
            let m = (m_prev.affine(ADAM_BETA1, 0.0)? + g.affine(1.0 - ADAM_BETA1, 0.0)?)?;
            let v = (v_prev.affine(ADAM_BETA2, 0.0)? + g.sqr()?.affine(1.0 - ADAM_BETA2, 0.0)?)?;
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + ADAM_EPS)?;
            let update = m.affine(lr / bc1, 0.0)?.div(&denom)?;
            var.set(&(theta - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(())
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: IphModel,
    pub optimizer: Adam,
    pub stage: u8,
    /// Steps completed within `stage`.
    pub step: u64,
    pub lineage: Vec<LineageEntry>,
    /// Exponential moving average of the total loss.
    pub running_loss: Option<f64>,
}

const RUNNING_DECAY: f64 = 0.98;

impl TrainState {
    pub fn fresh(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::from_model(IphModel::new(config, seed)?))
    }

    pub fn from_model(model: IphModel) -> Self {
        Self {
            model,
            optimizer: Adam::default(),
            stage: 0,
            step: 0,
            lineage: Vec::new(),
            running_loss: None,
        }
    }

    pub fn meta(&self) -> ArchiveMeta {
        let mut meta = ArchiveMeta::new(self.model.config());
        meta.stage = self.stage;
        meta.step = self.step;
        meta.lineage = self.lineage.clone();
        meta.extra.insert("adam_t".into(), self.optimizer.t.into());
        if let Some(r) = self.running_loss {
            meta.extra.insert("running_loss".into(), r.into());
        }
        meta
    }

    pub fn to_archive(&self) -> Result<WeightArchive> {
        let mut archive = self.model.to_archive(self.meta())?;
        for (kind, map) in [("m", &self.optimizer.m), ("v", &self.optimizer.v)] {
            for (name, t) in map {
                archive.tensors.insert(
                    format!("{OPTIM_PREFIX}{kind}.{name}"),
                    crate::model::TensorData {
                        shape: t.dims().to_vec(),
                        data: t.flatten_all()?.to_vec1()?,
                    },
                );
            }
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &WeightArchive) -> Result<Self> {
        let model = IphModel::from_archive(archive, None)?;
        let mut optimizer = Adam {
            t: archive.meta.extra.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(0),
            ..Default::default()
        };
        for (key, t) in &archive.tensors {
            let Some(rest) = key.strip_prefix(OPTIM_PREFIX) else {
                continue;
            };
            let tensor = Tensor::from_slice(&t.data, t.shape.as_slice(), model.device())?;
            match rest.split_once('.') {
                Some(("m", name)) => optimizer.m.insert(name.to_string(), tensor),
                Some(("v", name)) => optimizer.v.insert(name.to_string(), tensor),
                _ => {
                    return Err(Error::ArchiveParam {
                        param: key.clone(),
                        reason: "unknown optimizer entry".into(),
                    })
                }
            };
        }
        Ok(Self {
            model,
            optimizer,
            stage: archive.meta.stage,
            step: archive.meta.step,
            lineage: archive.meta.lineage.clone(),
            running_loss: archive.meta.extra.get("running_loss").and_then(|v| v.as_f64()),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&WeightArchive::load(path)?)
    }
}

/// Record indices for `step`: consecutive slices of per-epoch shuffles, so
/// the order depends only on `(seed, step)`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut perms: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    (0..batch as u64)
        .map(|j| {
            let k = step * batch as u64 + j;
            let epoch = k / n as u64;
            let perm = perms.entry(epoch).or_insert_with(|| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
                p
            });
            perm[(k % n as u64) as usize]
        })
        .collect()
}

#[derive(Serialize)]
struct LogLine<'a> {
    stage: u8,
    step: u64,
    lr: f64,
    batch: &'a [String],
    #[serde(flatten)]
    report: LossReport,
}

pub fn checkpoint_path(dir: &Path, stage: u8, step: u64) -> PathBuf {
    dir.join(format!("stage{stage}_step{step:06}.ihw"))
}

pub fn final_checkpoint_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}_final.ihw"))
}

/// Runs `cfg` from the state's position. A state from an earlier stage starts
/// this stage at step 0 with fresh optimizer moments; a state already in this
/// stage resumes at its step.
pub fn train_stage(mut state: TrainState, cfg: &StageConfig) -> Result<TrainState> {
    cfg.validate()?;
    if state.stage > cfg.stage {
        return Err(Error::Config(format!(
            "cannot run stage {} from a stage {} checkpoint",
            cfg.stage, state.stage
        )));
    }
    if cfg.stage > 1 && state.stage + 1 < cfg.stage {
        return Err(Error::Config(format!(
            "stage {} needs weights from stage {} (got stage {})",
            cfg.stage,
            cfg.stage - 1,
            state.stage
        )));
    }
    if state.model.config().resolution != cfg.resolution {
        return Err(Error::Config(format!(
            "model resolution {} differs from stage resolution {}",
            state.model.config().resolution,
            cfg.resolution
        )));
    }
    if state.stage != cfg.stage {
        state.stage = cfg.stage;
        state.step = 0;
        state.optimizer = Adam::default();
        state.running_loss = None;
    }
    let records = list_records(&cfg.dataset)?;
    if records.is_empty() {
        return Err(Error::MissingDataset(cfg.dataset.clone()));
    }
    let weights = cfg.effective_weights();
    let lr = cfg.learning_rate();
    let mut log = match &cfg.log {
        Some(p) => {
            if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };

    while state.step < cfg.steps {
        let step = state.step;
        let samples = load_batch(&cfg.dataset, &records, cfg, step)?;
        let batch = make_batch(&samples, cfg)?;
        let (loss, report) = batch_loss(&state.model, &batch, &weights)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch_ids: batch.ids,
            });
        }
        let grads = loss.backward()?;
        state.optimizer.step(&state.model, &grads, lr)?;
        state.step += 1;
        state.running_loss = Some(match state.running_loss {
            Some(r) => RUNNING_DECAY * r + (1.0 - RUNNING_DECAY) * report.total,
            None => report.total,
        });
        if let Some(w) = log.as_mut() {
            let line = LogLine {
                stage: cfg.stage,
                step: state.step,
                lr,
                batch: &batch.ids,
                report,
            };
            writeln!(w, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(cfg.log.as_ref().unwrap(), e))?;
        }
        if state.step % 50 == 0 {
            info!("stage {} step {} loss {:.5}", cfg.stage, state.step, report.total);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
                state.save(checkpoint_path(dir, cfg.stage, state.step))?;
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| Error::io(cfg.log.as_ref().unwrap(), e))?;
    }
    let entry = LineageEntry {
        stage: cfg.stage,
        step: state.step,
        dataset: cfg.dataset.display().to_string(),
    };
    if state.lineage.last().map(|l| l.stage) == Some(cfg.stage) {
        *state.lineage.last_mut().unwrap() = entry;
    } else {
        state.lineage.push(entry);
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        state.save(final_checkpoint_path(dir, cfg.stage))?;
    }
    Ok(state)
}

fn load_batch(dir: &Path, records: &[SampleMeta], cfg: &StageConfig, step: u64) -> Result<Vec<CompositeSample>> {
    let mut samples = batch_indices(records.len(), cfg.batch_size, cfg.seed, step)
        .into_iter()
        .map(|i| {
            let meta = records[i].clone();
            read_sample(&dir.join(&meta.id), meta)
        })
        .collect::<Result<Vec<_>>>()?;
    if cfg.exposure_jitter > 0.0 {
        jitter_exposure(&mut samples, cfg.exposure_jitter, derive_seed(cfg.seed ^ JITTER_STREAM, step));
    }
    Ok(samples)
}

const JITTER_STREAM: u64 = 0x6a69_7474_6572;

/// Relights each sample's scene by a gain `2^u`, `u` uniform in
/// `[-max_stops, max_stops]`: the ground truth and the composite's background
/// are scaled (and clamped to 1), the pasted foreground is left as it was.
/// The result is again a valid composite, one whose correct foreground
/// exposure can only be read off the surroundings.
pub fn jitter_exposure(samples: &mut [CompositeSample], max_stops: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in samples {
        let gain = 2f64.powf(rng.random_range(-max_stops..=max_stops)) as f32;
        let scale = |px: &mut [f32]| px.iter_mut().for_each(|v| *v = (*v * gain).min(1.0));
        s.ground_truth.map_pixels(|_, px| scale(px));
        let fg = &s.fg_mask;
        s.composite.map_pixels(|i, px| {
            if !fg.is_selected(i) {
                scale(px)
            }
        });
    }
}

/// Chains the stages in order. Every dataset is checked before any training.
pub fn run_curriculum(state: TrainState, cfgs: &[StageConfig]) -> Result<TrainState> {
    if cfgs.is_empty() {
        return Err(Error::Config("empty curriculum".into()));
    }
    for pair in cfgs.windows(2) {
        if pair[1].stage != pair[0].stage + 1 {
            return Err(Error::Config("curriculum stages must be consecutive".into()));
        }
    }
    for cfg in cfgs {
        cfg.validate()?;
        if list_records(&cfg.dataset)?.is_empty() {
            return Err(Error::MissingDataset(cfg.dataset.clone()));
        }
    }
    cfgs.iter().try_fold(state, train_stage)
}

/// Writes a fresh archive for `config` at `path`.
pub fn init_weights(config: ModelConfig, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    TrainState::fresh(config, seed)?.save(path)
}

/// Mean of per-step totals over the log's first and last `window` steps.
pub fn log_window_means(path: impl AsRef<Path>, window: usize) -> Result<(f64, f64)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let totals: Vec<f64> = text
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l)?;
            Ok(v["total"].as_f64().unwrap_or(f64::NAN))
        })
        .collect::<Result<_>>()?;
    let w = window.min(totals.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok((mean(&totals[..w]), mean(&totals[totals.len() - w..])))
}

/// Gradient of a scalar objective with respect to the harmonizer's image
/// input, for checking that the background cannot influence it.
pub fn harmonizer_input_gradient(model: &IphModel, batch: &Batch) -> Result<Tensor> {
    let input = candle_core::Var::from_tensor(&batch.composite)?;
    let masked = input.as_tensor().broadcast_mul(&batch.fg_mask)?;
    let code = model.style_code(&batch.composite, &batch.guide_mask)?.detach();
    let out = model.harmonize(&masked, &batch.fg_mask, &code)?;
    let objective = (out - &batch.ground_truth)?.abs()?.sum_all()?;
    let grads = objective.backward()?;
    Ok(grads
        .get(input.as_tensor())
        .cloned()
        .unwrap_or(input.as_tensor().zeros_like()?)
        .to_dtype(DType::F32)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::toy::write_toy_sources;
    use crate::dataset::{build_dataset, Annotations};
    use crate::Image;

    fn tiny() -> ModelConfig {
        ModelConfig {
            style_dim: 8,
            base_channels: 4,
            res_blocks: 1,
            resolution: 32,
        }
    }

    fn toy_dataset(dir: &Path, count: usize) -> PathBuf {
        let src = dir.join("src");
        let ann: Annotations = write_toy_sources(&src, 4, 48, 1).unwrap();
        let out = dir.join("data");
        build_dataset(&src, &ann, &out, count, 2).unwrap();
        out
    }

    fn cfg(stage: u8, data: &Path, steps: u64) -> StageConfig {
        StageConfig {
            batch_size: 3,
            resolution: 32,
            learning_rate: Some(1e-3),
            seed: 5,
            ..StageConfig::new(stage, data, steps)
        }
    }

    fn weights_of(s: &TrainState) -> Vec<Vec<f32>> {
        s.model
            .vars()
            .iter()
            .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1().unwrap())
            .collect()
    }

    #[test]
    fn config_defaults_and_parsing() {
        let c: StageConfig = serde_json::from_str(r#"{"stage": 2, "dataset": "d", "steps": 10}"#).unwrap();
        assert_eq!(c.learning_rate(), 1e-5);
        assert_eq!(c.batch_size, 48);
        assert_eq!(c.resolution, 256);
        assert!(c.stage1_style_losses);
        let t: StageConfig = toml::from_str("stage = 3\ndataset = \"d\"\nsteps = 1\nbatch_size = 8\n").unwrap();
        assert_eq!(t.learning_rate(), 1e-6);
        assert_eq!(t.batch_size, 8);
        let mut bad = c.clone();
        bad.resolution = 40;
        assert!(bad.validate().is_err());
        bad = c.clone();
        bad.learning_rate = Some(0.0);
        assert!(bad.validate().is_err());
        let mut s1 = StageConfig::new(1, "d", 1);
        s1.stage1_style_losses = false;
        assert_eq!(s1.effective_weights().beta, 0.0);
        assert_eq!(s1.effective_weights().lambda, 0.0);
    }

    #[test]
    fn exposure_jitter_relights_everything_but_the_pasted_foreground() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_dataset(dir.path(), 3);
        let original = crate::dataset::load_dataset(&data).unwrap();
        let mut a = original.clone();
        let mut b = original.clone();
        jitter_exposure(&mut a, 1.0, 9);
        jitter_exposure(&mut b, 1.0, 9);
        assert_eq!(a, b);
        for (j, o) in a.iter().zip(&original) {
            // Recover the gain from an unsaturated background pixel.
            let i = (0..o.composite.pixel_count())
                .find(|i| !o.fg_mask.is_selected(*i) && o.composite.pixel(*i)[0] > 0.05 && j.composite.pixel(*i)[0] < 1.0)
                .unwrap();
            let gain = j.composite.pixel(i)[0] / o.composite.pixel(i)[0];
            assert!((0.5 - 1e-5..=2.0 + 1e-5).contains(&gain), "gain {gain}");
            for i in 0..o.composite.pixel_count() {
                let scaled = |img: &Image| img.pixel(i).iter().map(|v| (v * gain).min(1.0)).collect::<Vec<_>>();
                let expect_gt = scaled(&o.ground_truth);
                let expect_comp = if o.fg_mask.is_selected(i) { o.composite.pixel(i).to_vec() } else { scaled(&o.composite) };
                for (got, want) in [(j.ground_truth.pixel(i), expect_gt), (j.composite.pixel(i), expect_comp)] {
                    assert!(got.iter().zip(&want).all(|(g, w)| (g - w).abs() < 1e-6));
                }
            }
            assert_eq!(j.fg_mask, o.fg_mask);
            assert_eq!(j.guide_mask, o.guide_mask);
        }
        let mut c = StageConfig::new(1, "d", 1);
        c.exposure_jitter = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn batch_masks_follow_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_dataset(dir.path(), 4);
        let samples = crate::dataset::load_dataset(&data).unwrap();
        let b1 = make_batch(&samples, &cfg(1, &data, 1)).unwrap();
        let inv = (1.0 - &b1.fg_mask).unwrap();
        let diff: f32 = (b1.guide_mask.clone() - inv).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(diff, 0.0);

        let b2 = make_batch(&samples, &cfg(2, &data, 1)).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let expect = s.guide_mask.resize_binary(32, 32).unwrap();
            let got: Vec<f32> = b2.guide_mask.get(i).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(got, expect.data());
        }
        // Harmonizer input is exactly zero outside the foreground.
        let x: Vec<f32> = b2.masked_fg.flatten_all().unwrap().to_vec1().unwrap();
        let m: Vec<f32> = b2.fg_mask.flatten_all().unwrap().to_vec1().unwrap();
        let n = 32 * 32;
        for (k, v) in x.iter().enumerate() {
            let (b, p) = (k / (3 * n), k % n);
            if m[b * n + p] == 0.0 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn background_gets_no_input_gradient() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_dataset(dir.path(), 3);
        let samples = crate::dataset::load_dataset(&data).unwrap();
        let batch = make_batch(&samples, &cfg(2, &data, 1)).unwrap();
        let model = IphModel::new(tiny(), 1).unwrap();
        let g: Vec<f32> = harmonizer_input_gradient(&model, &batch).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let m: Vec<f32> = batch.fg_mask.flatten_all().unwrap().to_vec1().unwrap();
        let n = 32 * 32;
        let mut inside = 0.0f32;
        for (k, v) in g.iter().enumerate() {
            let (b, p) = (k / (3 * n), k % n);
            if m[b * n + p] == 0.0 {
                assert_eq!(*v, 0.0);
            } else {
                inside += v.abs();
            }
        }
        assert!(inside > 0.0);
    }

    #[test]
    fn order_depends_only_on_seed_and_step() {
        let a = batch_indices(7, 3, 9, 5);
        assert_eq!(a, batch_indices(7, 3, 9, 5));
        // Every record appears once per epoch.
        let mut epoch: Vec<usize> = (0..7).flat_map(|s| batch_indices(7, 1, 9, s)).collect();
        epoch.sort();
        assert_eq!(epoch, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_dataset(dir.path(), 5);
        let start = || TrainState::fresh(tiny(), 3).unwrap();

        let zero = train_stage(start(), &cfg(1, &data, 0)).unwrap();
        assert_eq!(weights_of(&zero), weights_of(&start()));
        assert_eq!(zero.stage, 1);

        let s1 = train_stage(start(), &cfg(1, &data, 2)).unwrap();
        assert_eq!(weights_of(&s1), weights_of(&train_stage(start(), &cfg(1, &data, 2)).unwrap()));
        assert_ne!(weights_of(&s1), weights_of(&start()));

        // Stage 2 for 4 steps, versus 2 steps, checkpoint, reload, 2 more.
        let ckpt = dir.path().join("ckpt");
        let full = train_stage(s1.clone(), &cfg(2, &data, 4)).unwrap();
        let mut c = cfg(2, &data, 4);
        c.checkpoint_dir = Some(ckpt.clone());
        c.checkpoint_every = 2;
        c.log = Some(dir.path().join("log.jsonl"));
        train_stage(s1.clone(), &c).unwrap();
        let mid = TrainState::load(checkpoint_path(&ckpt, 2, 2)).unwrap();
        assert_eq!((mid.stage, mid.step), (2, 2));
        let resumed = train_stage(mid, &cfg(2, &data, 4)).unwrap();
        assert_eq!(weights_of(&resumed), weights_of(&full));
        assert_eq!(resumed.optimizer.t, full.optimizer.t);
        assert_eq!(resumed.lineage.iter().map(|l| l.stage).collect::<Vec<_>>(), vec![1, 2]);

        let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 4);
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert!(first["total"].as_f64().unwrap() > 0.0);
        assert_eq!(first["stage"], 2);
    }

    #[test]
    fn curriculum_checks_datasets_and_chains() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_dataset(dir.path(), 4);
        let missing = dir.path().join("nope");
        let cfgs = [cfg(1, &data, 1), cfg(2, &missing, 1)];
        let state = TrainState::fresh(tiny(), 3).unwrap();
        let before = weights_of(&state);
        assert!(matches!(run_curriculum(state.clone(), &cfgs), Err(Error::MissingDataset(_))));
        assert_eq!(weights_of(&state), before);

        let only1 = train_stage(state.clone(), &cfg(1, &data, 2)).unwrap();
        let chained = run_curriculum(state.clone(), &[cfg(1, &data, 2), cfg(2, &data, 0), cfg(3, &data, 0)]).unwrap();
        assert_eq!(weights_of(&chained), weights_of(&only1));
        assert_eq!(chained.stage, 3);
        assert_eq!(chained.lineage.iter().map(|l| l.stage).collect::<Vec<_>>(), vec![1, 2, 3]);

        assert!(train_stage(state, &cfg(3, &data, 1)).is_err());
    }
}
