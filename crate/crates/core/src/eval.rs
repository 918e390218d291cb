//! Quadrant prediction, overlap metrics and run reports.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{PairImages, SamplePair};
use crate::error::{Error, Result};
use crate::grid::{
    compose_inference_composite, extract_quadrant, resize_image, resize_mask, single_image_input, Composite, Quadrant,
    QUADRANT_SIDE,
};
use crate::image::{Image, Mask};
use crate::masking::{inference_mask, sample_mask_with, PatchGrid, PatchMask};
use crate::rng::{self, Stream};
use crate::train::{ordered_map, LabeledImage, SINGLE_IMAGE_RATIOS};
use crate::vit::{forward, Checkpoint, ModelParams};

pub type BinaryMask = Mask;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Pixel counts behind both overlap scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: usize,
    pub predicted: usize,
    pub truth: usize,
    pub union: usize,
}

pub fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<Overlap> {
    if pred.dims() != gt.dims() {
        return Err(Error::InvalidDimension(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut o = Overlap { intersection: 0, predicted: 0, truth: 0, union: 0 };
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        o.intersection += (p && g) as usize;
        o.predicted += p as usize;
        o.truth += g as usize;
        o.union += (p || g) as usize;
    }
    Ok(o)
}

impl Overlap {
    pub fn dice(&self) -> f64 {
        let denom = self.predicted + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// 2|P∩G| / (|P|+|G|), 1.0 when both are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(overlap(pred, gt)?.dice())
}

/// |P∩G| / |P∪G|, 1.0 when both are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(overlap(pred, gt)?.iou())
}

/// Everything a single quadrant prediction produces.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub composite: Composite,
    pub reconstruction: Image,
    pub mask: BinaryMask,
}

fn check_canvas(params: &ModelParams<f32>) -> Result<()> {
    let grid = PatchGrid::default();
    if params.config.image_side != grid.image_side || params.config.patch_side != grid.patch_side {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint expects {}px canvas with {}px patches, prediction uses {}px/{}px",
            params.config.image_side, params.config.patch_side, grid.image_side, grid.patch_side
        )));
    }
    Ok(())
}

pub fn predict_detailed(
    params: &ModelParams<f32>,
    support_image: &Image,
    support_mask: &Mask,
    query_image: &Image,
    threshold: f32,
) -> Result<Prediction> {
    check_canvas(params)?;
    let composite = compose_inference_composite(support_image, support_mask, query_image, "predict")?;
    let recon = forward(params, &composite, &inference_mask(&PatchGrid::default()))?;
    let reconstruction = recon.pixels.clamp01();
    let quadrant = Composite::new(reconstruction.clone(), "predict")?;
    let mask = extract_quadrant(&quadrant, Quadrant::QueryTarget).threshold(threshold);
    Ok(Prediction { composite, reconstruction, mask })
}

/// Segments `query_image` by reconstructing the fully masked target quadrant.
pub fn predict(params: &ModelParams<f32>, support_image: &Image, support_mask: &Mask, query_image: &Image) -> Result<BinaryMask> {
    Ok(predict_detailed(params, support_image, support_mask, query_image, DEFAULT_THRESHOLD)?.mask)
}

/// Single-image ablation prediction: the image alone under `patch_mask`,
/// output scaled back to quadrant resolution before thresholding.
pub fn predict_single_image(params: &ModelParams<f32>, image: &Image, patch_mask: &PatchMask, threshold: f32) -> Result<BinaryMask> {
    check_canvas(params)?;
    let input = single_image_input(image, "single")?;
    let recon = forward(params, &input, patch_mask)?;
    Ok(resize_image(&recon.pixels.clamp01(), QUADRANT_SIDE, QUADRANT_SIDE)?.threshold(threshold))
}

/// Test-time patch mask for the single-image ablation: ratio drawn per
/// query from the training ratio set.
pub fn single_image_eval_mask(eval_seed: u64, index: usize) -> PatchMask {
    let mut r = rng::stream(eval_seed, Stream::EvalMask, &[index as u64]);
    let ratio = SINGLE_IMAGE_RATIOS[r.random_range(0..SINGLE_IMAGE_RATIOS.len())];
    sample_mask_with(&PatchGrid::default(), ratio, &mut r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFingerprint {
    pub checkpoint_sha256: String,
    pub eval_seed: u64,
    pub threshold: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_pair: Vec<PairMetrics>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub n_pairs: usize,
    pub fingerprint: RunFingerprint,
}

impl MetricsReport {
    pub fn from_pairs(mut per_pair: Vec<PairMetrics>, fingerprint: RunFingerprint) -> Result<Self> {
        if per_pair.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        per_pair.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
        let n = per_pair.len();
        let mean_dice = per_pair.iter().map(|p| p.dice).sum::<f64>() / n as f64;
        let mean_iou = per_pair.iter().map(|p| p.iou).sum::<f64>() / n as f64;
        Ok(MetricsReport { per_pair, mean_dice, mean_iou, n_pairs: n, fingerprint })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,dice,iou\n");
        for p in &self.per_pair {
            let _ = writeln!(out, "{},{},{}", p.pair_id, p.dice, p.iou);
        }
        out
    }

    /// `DC=<v> IoU=<v>`
    pub fn summary_line(&self) -> String {
        format!("DC={:.4} IoU={:.4}", self.mean_dice, self.mean_iou)
    }

    /// Writes `metrics.json` and `metrics.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("metrics.json", self.to_json()), ("metrics.csv", self.to_csv())] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn score(id: &str, pred: &BinaryMask, gt: &Mask) -> Result<PairMetrics> {
    let gt = resize_mask(gt, pred.height(), pred.width())?;
    let o = overlap(pred, &gt)?;
    Ok(PairMetrics { pair_id: id.to_string(), dice: o.dice(), iou: o.iou() })
}

/// Scores in-memory pairs. Deterministic given the checkpoint and pairs.
pub fn evaluate_pairs(checkpoint: &Checkpoint, pairs: &[PairImages], threshold: f32) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    check_threshold(threshold)?;
    let params = &checkpoint.params;
    let per_pair = ordered_map(pairs, |_, p| {
        let pred = predict_detailed(params, &p.support_image, &p.support_mask, &p.query_image, threshold)?;
        score(&p.pair_id, &pred.mask, &p.query_mask)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_pairs(per_pair, fingerprint(checkpoint, 0, threshold))
}

/// Loads each pair from `root` and scores it.
pub fn evaluate_run(checkpoint: &Checkpoint, pairs: &[SamplePair], root: &Path, threshold: f32) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let loaded = pairs.iter().map(|p| PairImages::load(p, root)).collect::<Result<Vec<_>>>()?;
    evaluate_pairs(checkpoint, &loaded, threshold)
}

/// Scores a single-image checkpoint on labeled frames, each under its
/// own seeded test-time patch mask.
pub fn evaluate_single_image(
    checkpoint: &Checkpoint,
    records: &[LabeledImage],
    threshold: f32,
    eval_seed: u64,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    check_threshold(threshold)?;
    let params = &checkpoint.params;
    let per_pair = ordered_map(records, |i, r| {
        let pred = predict_single_image(params, &r.image, &single_image_eval_mask(eval_seed, i), threshold)?;
        score(&r.id, &pred, &r.mask)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_pairs(per_pair, fingerprint(checkpoint, eval_seed, threshold))
}

fn check_threshold(threshold: f32) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::ConfigRejected(format!("threshold {threshold} must lie strictly between 0 and 1")))
    }
}

fn fingerprint(checkpoint: &Checkpoint, eval_seed: u64, threshold: f32) -> RunFingerprint {
    RunFingerprint { checkpoint_sha256: checkpoint.digest(), eval_seed, threshold }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{init_params, ModelConfig};

    fn grid4(cells: &[(usize, usize)]) -> Mask {
        Mask::from_fn(4, 4, |y, x| cells.contains(&(y, x)))
    }

    #[test]
    fn worked_example() {
        let p = grid4(&[(1, 1), (1, 2), (2, 1), (2, 2)]);
        let g = grid4(&[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice(&p, &g).unwrap(), 0.25);
        assert!((iou(&p, &g).unwrap() - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn identity_disjoint_and_empty() {
        let a = grid4(&[(0, 0), (3, 3)]);
        let b = grid4(&[(1, 1)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let e = Mask::empty(4, 4);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(matches!(dice(&a, &Mask::empty(3, 4)), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn empty_report_is_an_error() {
        let ck = Checkpoint::new(init_params(&ModelConfig::toy(1, 8, 2), 0).unwrap());
        assert!(matches!(evaluate_pairs(&ck, &[], 0.5), Err(Error::EmptyEvaluation)));
        assert!(matches!(MetricsReport::from_pairs(vec![], fingerprint(&ck, 0, 0.5)), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn prediction_shape_and_filler_independence() {
        let params = init_params(&ModelConfig::toy(2, 16, 2), 3).unwrap();
        let p = PairImages::synthetic(4, 0, 1, 112).unwrap();
        let pred = predict(&params, &p.support_image, &p.support_mask, &p.query_image).unwrap();
        assert_eq!(pred.dims(), (112, 112));

        let zero = crate::grid::compose_inference_composite_with_fill(&p.support_image, &p.support_mask, &p.query_image, "a", 0.0).unwrap();
        let half = crate::grid::compose_inference_composite_with_fill(&p.support_image, &p.support_mask, &p.query_image, "a", 0.7).unwrap();
        let m = inference_mask(&PatchGrid::default());
        assert_eq!(forward(&params, &zero, &m).unwrap().pixels, forward(&params, &half, &m).unwrap().pixels);
    }

    #[test]
    fn rejects_foreign_canvas() {
        let mut cfg = ModelConfig::toy(1, 8, 2);
        cfg.image_side = 112;
        let params = init_params(&cfg, 0).unwrap();
        let p = PairImages::synthetic(4, 0, 1, 112).unwrap();
        assert!(matches!(
            predict(&params, &p.support_image, &p.support_mask, &p.query_image),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn report_is_sorted_and_serializes() {
        let ck = Checkpoint::new(init_params(&ModelConfig::toy(1, 8, 2), 0).unwrap());
        let pairs: Vec<PairImages> = [(5, 6), (0, 1)].iter().map(|&(s, q)| PairImages::synthetic(2, s, q, 112).unwrap()).collect();
        let report = evaluate_pairs(&ck, &pairs, 0.5).unwrap();
        assert_eq!(report.n_pairs, 2);
        assert!(report.per_pair[0].pair_id < report.per_pair[1].pair_id);
        assert_eq!(report.to_csv().lines().count(), 3);
        let back: MetricsReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
        assert!(report.summary_line().starts_with("DC="));
    }
}
