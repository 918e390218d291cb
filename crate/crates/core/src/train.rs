//! Region-restricted L1 reconstruction loss, batch gradients and the
//! training loops for the prompt-composite model and the single-image
//! ablation.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PairImages;
use crate::error::{Error, Result};
use crate::grid::{compose_training_composite, single_image_input, single_image_target, Composite};
use crate::image::{Image, Mask};
use crate::masking::{loss_pixel_region, sample_mask_with, LossRegion, LossVariant, PatchGrid, PatchMask};
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::rng::{self, Stream};
use crate::tensor::Scalar;
use crate::vit::{backward, checkpoint_digest, forward_train, init_params, Checkpoint, ModelConfig, ModelParams, Reconstruction};

/// Per-sample mask ratios of the single-image ablation.
pub const SINGLE_IMAGE_RATIOS: [f32; 4] = [0.3, 0.45, 0.6, 0.75];

pub const THREADS_ENV: &str = "SIMICL_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    SimIcl,
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mask_ratio: f32,
    pub loss_variant: LossVariant,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps, independent of epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub mode: TrainMode,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mask_ratio: 0.6,
            loss_variant: LossVariant::MaskedAreas,
            learning_rate: 5e-4,
            weight_decay: 0.05,
            batch_size: 64,
            epochs: 1200,
            max_steps: None,
            seed: 0,
            mode: TrainMode::SimIcl,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Rejects invalid settings, including the ratio/region combination
    /// that leaves nothing to average the loss over.
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::ConfigRejected(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::ConfigRejected("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidRatio(self.mask_ratio));
        }
        if self.mode == TrainMode::SimIcl
            && self.loss_variant == LossVariant::MaskedAreas
            && PatchGrid::default().masked_count(self.mask_ratio) == 0
        {
            return Err(Error::ConfigRejected(format!(
                "mask ratio {} with loss `{}` masks no patches, so the loss region is empty",
                self.mask_ratio, self.loss_variant
            )));
        }
        Ok(())
    }
}

/// Mean absolute error over the pixels of `region`.
pub fn mae_loss(recon: &Reconstruction, target: &Composite, region: &LossRegion) -> Result<f32> {
    let (r, t) = (recon.pixels.data(), target.pixels().data());
    if r.len() != t.len() || r.len() != region.pixels().len() {
        return Err(Error::InvalidDimension("reconstruction, target and region sizes differ".into()));
    }
    if region.count() == 0 {
        return Err(Error::EmptyLossRegion(region.variant));
    }
    let sum: f64 = r
        .iter()
        .zip(t)
        .zip(region.pixels())
        .filter(|(_, &inside)| inside)
        .map(|((&a, &b), _)| (a as f64 - b as f64).abs())
        .sum();
    Ok((sum / region.count() as f64) as f32)
}

/// One training example: model input, reconstruction target, patch mask
/// and the pixels the loss covers.
pub struct BatchItem<'a, T> {
    pub input: &'a [T],
    pub target: &'a [T],
    pub mask: &'a PatchMask,
    pub region: &'a LossRegion,
    /// Seeds this sample's dropout draws; ignored when dropout is off.
    pub dropout_key: Option<u64>,
}

fn configured_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = configured_threads();
        (n > 1).then(|| rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool"))
    })
    .as_ref()
}

/// Runs `f` over `items`, in parallel when more than one thread is
/// configured. Output order always matches input order.
pub(crate) fn ordered_map<I: Sync, O: Send>(items: &[I], f: impl Fn(usize, &I) -> O + Sync + Send) -> Vec<O> {
    match pool() {
        Some(p) if items.len() > 1 => p.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()),
        _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}

fn sample_loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    item: &BatchItem<'_, T>,
    batch_len: usize,
) -> Result<(f64, ModelParams<T>)> {
    if item.region.count() == 0 {
        return Err(Error::EmptyLossRegion(item.region.variant));
    }
    let mut drop_rng = item.dropout_key.map(|k| rng::stream(k, Stream::Dropout, &[]));
    let (out, cache) = forward_train(params, item.input, item.mask, drop_rng.as_mut())?;
    let count = item.region.count() as f64;
    let scale = T::of(1.0 / (count * batch_len as f64));
    let mut sum = 0.0f64;
    let mut d_out = vec![T::zero(); out.len()];
    for (j, (&o, &t)) in out.iter().zip(item.target).enumerate() {
        if item.region.pixels()[j] {
            let r = o - t;
            sum += r.to_f64().unwrap().abs();
            // L1 subgradient with sign(0) = 0.
            d_out[j] = if r > T::zero() {
                scale
            } else if r < T::zero() {
                -scale
            } else {
                T::zero()
            };
        }
    }
    let mut grads = params.zeros_like();
    backward(params, &cache, &d_out, &mut grads);
    Ok((sum / count, grads))
}

/// Batch-mean loss and its exact gradient with respect to every parameter.
///
/// Per-sample gradients are always formed separately and summed in batch
/// order, so results are bitwise independent of the thread count.
pub fn compute_gradients<T: Scalar>(params: &ModelParams<T>, batch: &[BatchItem<'_, T>]) -> Result<(f64, ModelParams<T>)> {
    if batch.is_empty() {
        return Err(Error::ConfigRejected("empty batch".into()));
    }
    let per_sample = ordered_map(batch, |_, item| sample_loss_and_grads(params, item, batch.len()));
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss / batch.len() as f64, total))
}

/// Batch-mean loss only (no gradients).
pub fn batch_loss<T: Scalar>(params: &ModelParams<T>, batch: &[BatchItem<'_, T>]) -> Result<f64> {
    let mut total = 0.0;
    for item in batch {
        let (out, _) = forward_train(params, item.input, item.mask, None)?;
        let sum: f64 = out
            .iter()
            .zip(item.target)
            .zip(item.region.pixels())
            .filter(|(_, &inside)| inside)
            .map(|((&o, &t), _)| (o - t).to_f64().unwrap().abs())
            .sum();
        total += sum / item.region.count() as f64;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub mask_ratio: f32,
    /// Seconds since training started. Not part of the reproducible trajectory.
    pub wall_time: f64,
    /// SHA-256 over the batch's patch masks, in batch order.
    pub mask_digest: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub config_fingerprint: String,
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<String>,
}

impl TrainLog {
    /// True when both logs describe the same trajectory (wall time ignored).
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.config_fingerprint == other.config_fingerprint
            && self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.step == b.step
                    && a.epoch == b.epoch
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.mask_ratio.to_bits() == b.mask_ratio.to_bits()
                    && a.mask_digest == b.mask_digest
            })
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Mean loss over the trailing `window` steps ending at each step.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        (0..self.steps.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                let s = &self.steps[lo..=i];
                s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

pub type StepCallback<'a> = Box<dyn FnMut(&StepRecord) + 'a>;

/// Optional side effects of a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Where checkpoints and the step log go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Write an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
    pub on_step: Option<StepCallback<'a>>,
}

/// Input/target canvases for one training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub input: Composite,
    pub target: Composite,
}

/// A labeled frame for the single-image ablation.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}

pub fn simicl_examples(pairs: &[PairImages]) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|p| {
            let c = compose_training_composite(&p.support_image, &p.support_mask, &p.query_image, &p.query_mask, &p.pair_id)?;
            Ok(Example { id: p.pair_id.clone(), input: c.clone(), target: c })
        })
        .collect()
}

pub fn single_image_examples(records: &[LabeledImage]) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            Ok(Example {
                id: r.id.clone(),
                input: single_image_input(&r.image, &r.id)?,
                target: single_image_target(&r.mask, &r.id)?,
            })
        })
        .collect()
}

fn fingerprint(model: &ModelConfig, train: &TrainConfig) -> String {
    let text = format!(
        "{}\n{}",
        serde_json::to_string(model).expect("serializes"),
        serde_json::to_string(train).expect("serializes")
    );
    checkpoint_digest(text.as_bytes())[..16].to_string()
}

fn write_checkpoint(dir: &Path, name: &str, ck: &Checkpoint) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    ck.save(&path)?;
    Ok(path.display().to_string())
}

/// Draws the patch mask for example `index` at `epoch`.
pub fn training_mask(train: &TrainConfig, epoch: usize, index: usize) -> PatchMask {
    let grid = PatchGrid::default();
    let mut rng = rng::stream(train.seed, Stream::PatchMask, &[epoch as u64, index as u64]);
    let ratio = match train.mode {
        TrainMode::SimIcl => train.mask_ratio,
        TrainMode::Single => {
            let mut r = rng::stream(train.seed, Stream::SingleImageRatio, &[epoch as u64, index as u64]);
            SINGLE_IMAGE_RATIOS[r.random_range(0..SINGLE_IMAGE_RATIOS.len())]
        }
    };
    sample_mask_with(&grid, ratio, &mut rng)
}

/// Epoch-level visiting order of the examples.
pub fn epoch_order(train: &TrainConfig, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(train.seed, Stream::EpochOrder, &[epoch as u64]));
    order
}

fn run_training(
    model: &ModelConfig,
    train: &TrainConfig,
    examples: &[Example],
    variant: LossVariant,
    mut hooks: TrainHooks<'_>,
) -> Result<(Checkpoint, TrainLog)> {
    model.validate()?;
    train.validate()?;
    if examples.is_empty() {
        return Err(Error::ConfigRejected("no training examples".into()));
    }
    let grid = PatchGrid::new(model.image_side, model.patch_side)?;
    if grid != PatchGrid::default() {
        return Err(Error::ConfigRejected(format!(
            "training needs a {}px canvas with {}px patches",
            PatchGrid::default().image_side,
            PatchGrid::default().patch_side
        )));
    }

    let mut params = init_params(model, train.seed)?;
    let mut state = OptimizerState::new(&params);
    let adamw = train.adamw();
    let mut log = TrainLog { config_fingerprint: fingerprint(model, train), ..Default::default() };
    let started = Instant::now();
    let max_steps = train.max_steps.unwrap_or(usize::MAX);
    let mut step = 0usize;

    'epochs: for epoch in 0..train.epochs {
        let order = epoch_order(train, epoch, examples.len());
        for chunk in order.chunks(train.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            let masks: Vec<PatchMask> = chunk.iter().map(|&i| training_mask(train, epoch, i)).collect();
            let regions = masks
                .iter()
                .map(|m| loss_pixel_region(variant, m, &grid))
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<BatchItem<'_, f32>> = chunk
                .iter()
                .zip(&masks)
                .zip(&regions)
                .map(|((&i, mask), region)| BatchItem {
                    input: examples[i].input.pixels().data(),
                    target: examples[i].target.pixels().data(),
                    mask,
                    region,
                    dropout_key: (model.dropout > 0.0)
                        .then(|| rng::derive_key(train.seed, Stream::Dropout, &[epoch as u64, i as u64])),
                })
                .collect();

            let last_good = params.clone();
            let result = compute_gradients(&params, &batch).and_then(|(loss, grads)| {
                if !loss.is_finite() || !grads.all_finite() {
                    return Err(Error::Numerical { stage: "gradients", layer: None });
                }
                adamw_step(&mut params, &grads, &mut state, &adamw)?;
                if !params.all_finite() {
                    return Err(Error::Numerical { stage: "optimizer update", layer: None });
                }
                Ok(loss)
            });
            let loss = match result {
                Ok(l) => l,
                Err(e) => {
                    if let Some(dir) = &hooks.out_dir {
                        write_checkpoint(dir, "last_good.ckpt", &Checkpoint::new(last_good))?;
                    }
                    return Err(e);
                }
            };

            step += 1;
            let bits: String = masks.iter().map(|m| m.to_bit_string()).collect();
            let record = StepRecord {
                step,
                epoch,
                loss,
                mask_ratio: masks.iter().map(|m| m.ratio_requested).sum::<f32>() / masks.len() as f32,
                wall_time: started.elapsed().as_secs_f64(),
                mask_digest: checkpoint_digest(bits.as_bytes()),
            };
            if let Some(cb) = hooks.on_step.as_mut() {
                cb(&record);
            }
            log.steps.push(record);

            if let Some(dir) = &hooks.out_dir {
                if hooks.checkpoint_every > 0 && step.is_multiple_of(hooks.checkpoint_every) {
                    let ck = Checkpoint { params: params.clone(), optimizer: Some(state.clone()) };
                    log.checkpoints.push(write_checkpoint(dir, &format!("step{step:06}.ckpt"), &ck)?);
                }
            }
        }
    }

    let checkpoint = Checkpoint { params, optimizer: Some(state) };
    if let Some(dir) = &hooks.out_dir {
        log.checkpoints.push(write_checkpoint(dir, "final.ckpt", &checkpoint)?);
        log.save(&dir.join("train_log.jsonl"))?;
    }
    Ok((checkpoint, log))
}

/// Trains on support/query composites with a fixed mask ratio.
pub fn train_run(model: &ModelConfig, train: &TrainConfig, pairs: &[PairImages], hooks: TrainHooks<'_>) -> Result<(Checkpoint, TrainLog)> {
    if train.mode != TrainMode::SimIcl {
        return Err(Error::ConfigRejected("train_run expects mode simicl".into()));
    }
    train.validate()?;
    if pairs.is_empty() {
        return Err(Error::ConfigRejected("no training pairs".into()));
    }
    let examples = simicl_examples(pairs)?;
    run_training(model, train, &examples, train.loss_variant, hooks)
}

/// Single-image ablation: the image alone as input, its mask as target,
/// per-sample ratios from [`SINGLE_IMAGE_RATIOS`], loss over all pixels.
pub fn single_image_run(
    model: &ModelConfig,
    train: &TrainConfig,
    records: &[LabeledImage],
    hooks: TrainHooks<'_>,
) -> Result<(Checkpoint, TrainLog)> {
    if train.mode != TrainMode::Single {
        return Err(Error::ConfigRejected("single_image_run expects mode single".into()));
    }
    if records.is_empty() {
        return Err(Error::ConfigRejected("no training images".into()));
    }
    let examples = single_image_examples(records)?;
    let train = TrainConfig { loss_variant: LossVariant::AllAreas, ..train.clone() };
    run_training(model, &train, &examples, LossVariant::AllAreas, hooks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Quadrant, COMPOSITE_SIDE};
    use crate::masking::sample_mask;

    fn comp(f: impl FnMut(usize, usize) -> f32) -> Composite {
        Composite::new(Image::from_fn(COMPOSITE_SIDE, COMPOSITE_SIDE, f), "t").unwrap()
    }

    fn region(v: LossVariant) -> LossRegion {
        let g = PatchGrid::default();
        loss_pixel_region(v, &sample_mask(&g, 0.45, 1).unwrap(), &g).unwrap()
    }

    #[test]
    fn mae_identity_and_offsets() {
        let target = comp(|y, x| ((y + x) % 10) as f32 / 20.0);
        let same = Reconstruction { pixels: target.pixels().clone() };
        for v in LossVariant::ALL {
            assert_eq!(mae_loss(&same, &target, &region(v)).unwrap(), 0.0);
        }
        let shifted = Reconstruction { pixels: Image::from_fn(224, 224, |y, x| target.pixels().get(y, x) + 0.1) };
        for v in LossVariant::ALL {
            assert!((mae_loss(&shifted, &target, &region(v)).unwrap() - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn mae_target_quadrant_weighting() {
        let target = comp(|_, _| 0.5);
        let recon = Reconstruction {
            pixels: Image::from_fn(224, 224, |y, x| if Quadrant::QueryTarget.contains(y, x) { 0.7 } else { 0.5 }),
        };
        // Double-loop oracle: 12544 pixels off by 0.2 out of 50176.
        let mut sum = 0.0f64;
        for y in 0..224 {
            for x in 0..224 {
                sum += (recon.pixels.get(y, x) as f64 - 0.5).abs();
            }
        }
        assert!((sum / 50176.0 - 0.05).abs() < 1e-6);
        let tq = mae_loss(&recon, &target, &region(LossVariant::TargetQuadrant)).unwrap();
        let all = mae_loss(&recon, &target, &region(LossVariant::AllAreas)).unwrap();
        assert!((tq - 0.2).abs() < 1e-6);
        assert!((all - 0.05).abs() < 1e-6);
    }

    #[test]
    fn rejects_degenerate_combination() {
        let cfg = TrainConfig { mask_ratio: 0.0, loss_variant: LossVariant::MaskedAreas, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::ConfigRejected(_))));
        for v in [LossVariant::AllAreas, LossVariant::SegmentationQuadrants, LossVariant::TargetQuadrant] {
            assert!(TrainConfig { mask_ratio: 0.0, loss_variant: v, ..Default::default() }.validate().is_ok());
        }
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_head_matching_target_has_zero_bias_gradient() {
        let cfg = ModelConfig::toy(1, 16, 2);
        let mut params = init_params(&cfg, 1).unwrap();
        params.head_w.data.fill(0.0);
        params.head_b.data.fill(0.25);
        let target = comp(|_, _| 0.25);
        let g = PatchGrid::default();
        let mask = sample_mask(&g, 0.5, 2).unwrap();
        let reg = loss_pixel_region(LossVariant::AllAreas, &mask, &g).unwrap();
        let item = BatchItem { input: target.pixels().data(), target: target.pixels().data(), mask: &mask, region: &reg, dropout_key: None };
        let (loss, grads) = compute_gradients(&params, &[item]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.head_b.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_samples_keep_mean_gradient() {
        let cfg = ModelConfig::toy(1, 16, 2);
        let params = init_params(&cfg, 4).unwrap().cast::<f64>();
        let input: Vec<f64> = (0..224 * 224).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let g = PatchGrid::default();
        let mask = sample_mask(&g, 0.6, 3).unwrap();
        let reg = loss_pixel_region(LossVariant::MaskedAreas, &mask, &g).unwrap();
        let item = || BatchItem { input: &input, target: &input, mask: &mask, region: &reg, dropout_key: None };
        let (l1, g1) = compute_gradients(&params, &[item()]).unwrap();
        let (l2, g2) = compute_gradients(&params, &[item(), item()]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (&x, &y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn mask_token_receives_gradient() {
        let cfg = ModelConfig::toy(2, 16, 2);
        let g = PatchGrid::default();
        let input: Vec<f32> = (0..224 * 224).map(|i| ((i * 13) % 50) as f32 / 50.0).collect();
        for seed in 0..3 {
            let params = init_params(&cfg, seed).unwrap();
            let mask = sample_mask(&g, 0.3, seed).unwrap();
            let reg = loss_pixel_region(LossVariant::MaskedAreas, &mask, &g).unwrap();
            let item = BatchItem { input: &input, target: &input, mask: &mask, region: &reg, dropout_key: None };
            let (_, grads) = compute_gradients(&params, &[item]).unwrap();
            assert!(grads.mask_token.data.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn training_masks_are_deterministic_and_ratio_exact() {
        let cfg = TrainConfig { seed: 5, ..Default::default() };
        let a = training_mask(&cfg, 3, 7);
        assert_eq!(a, training_mask(&cfg, 3, 7));
        assert_eq!(a.count(), 118);
        let single = TrainConfig { mode: TrainMode::Single, ..cfg };
        for i in 0..50 {
            let m = training_mask(&single, 0, i);
            assert!(SINGLE_IMAGE_RATIOS.contains(&m.ratio_requested));
        }
    }

    #[test]
    fn tiny_run_is_reproducible() {
        let pairs: Vec<PairImages> = (0..2).map(|i| PairImages::synthetic(1, 2 * i, 2 * i + 1, 112).unwrap()).collect();
        let model = ModelConfig::toy(1, 16, 2);
        let train = TrainConfig { batch_size: 2, epochs: 3, seed: 9, ..Default::default() };
        let (ck_a, log_a) = train_run(&model, &train, &pairs, TrainHooks::default()).unwrap();
        let (ck_b, log_b) = train_run(&model, &train, &pairs, TrainHooks::default()).unwrap();
        assert_eq!(log_a.steps.len(), 3);
        assert!(log_a.same_trajectory(&log_b));
        assert_eq!(ck_a, ck_b);
        assert!(log_a.steps.iter().all(|s| s.loss.is_finite()));

        let bad = TrainConfig { mask_ratio: 0.0, ..train.clone() };
        assert!(matches!(train_run(&model, &bad, &pairs, TrainHooks::default()), Err(Error::ConfigRejected(_))));
    }

    #[test]
    fn single_image_inputs_are_canvas_sized() {
        let (image, mask) = crate::data::generate_synthetic_sample(2, 0, 112).unwrap();
        let ex = single_image_examples(&[LabeledImage { id: "a".into(), image, mask }]).unwrap();
        assert_eq!(ex[0].input.pixels().dims(), (224, 224));
        assert_eq!(ex[0].target.pixels().dims(), (224, 224));
        assert!(ex[0].target.pixels().data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
