//! Central finite-difference verification of the analytic gradients.
//!
//! Runs in f64 on a two-sample batch (ratio 0.6, masked-area loss). The L1
//! loss has a kink wherever a residual crosses zero. A probe whose stencil
//! crosses one measures a one-sided slope, so such coordinates are redrawn
//! rather than scored.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::data::PairImages;
use crate::error::{Error, Result};
use crate::grid::compose_training_composite;
use crate::masking::{loss_pixel_region, sample_mask_with, LossRegion, LossVariant, PatchGrid, PatchMask};
use crate::rng::{self, Stream};
use crate::train::{compute_gradients, BatchItem};
use crate::vit::{forward_train, init_params, ModelConfig, ModelParams};

pub const STEP: f64 = 1e-3;
/// Five-point central stencil, in multiples of [`STEP`]. Truncation error
/// is O(h⁴); the three-point form leaves O(h²) error near 1e-3 relative
/// once layer norms see short token vectors.
const STENCIL: [f64; 4] = [2.0, 1.0, -1.0, -2.0];
/// Spread of the perturbation added to freshly initialized parameters.
pub const BASE_JITTER: f64 = 0.1;
/// Gradients below this magnitude are compared in absolute terms, since
/// the stencil's roundoff floor sits near 1e-12.
pub const ABS_FLOOR: f64 = 1e-6;
pub const PROBES: usize = 50;
/// Residuals closer to zero than this count as sitting on the kink.
pub const KINK_MARGIN: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct Probe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

struct Case {
    inputs: Vec<Vec<f64>>,
    masks: Vec<PatchMask>,
    regions: Vec<LossRegion>,
}

impl Case {
    fn batch(&self) -> Vec<BatchItem<'_, f64>> {
        (0..self.inputs.len())
            .map(|i| BatchItem {
                input: &self.inputs[i],
                target: &self.inputs[i],
                mask: &self.masks[i],
                region: &self.regions[i],
                dropout_key: None,
            })
            .collect()
    }
}

fn build_case(seed: u64) -> Result<Case> {
    let grid = PatchGrid::default();
    let mut case = Case { inputs: vec![], masks: vec![], regions: vec![] };
    for i in 0..2u32 {
        let p = PairImages::synthetic(seed, 2 * i, 2 * i + 1, 112)?;
        let c = compose_training_composite(&p.support_image, &p.support_mask, &p.query_image, &p.query_mask, "check")?;
        let mask = sample_mask_with(&grid, 0.6, &mut rng::stream(seed, Stream::GradCheck, &[1, i as u64]));
        case.regions.push(loss_pixel_region(LossVariant::MaskedAreas, &mask, &grid)?);
        case.masks.push(mask);
        case.inputs.push(c.pixels().data().iter().map(|&v| v as f64).collect());
    }
    Ok(case)
}

/// Loss plus the sign pattern of every in-region residual, and the
/// smallest residual magnitude.
fn evaluate(params: &ModelParams<f64>, case: &Case) -> Result<(f64, Vec<i8>, f64)> {
    let mut loss = 0.0;
    let mut signs = Vec::new();
    let mut closest = f64::INFINITY;
    for item in case.batch() {
        let (out, _) = forward_train(params, item.input, item.mask, None)?;
        let mut sum = 0.0;
        for ((&o, &t), &inside) in out.iter().zip(item.target).zip(item.region.pixels()) {
            if inside {
                let r = o - t;
                sum += r.abs();
                signs.push(r.signum() as i8);
                closest = closest.min(r.abs());
            }
        }
        loss += sum / item.region.count() as f64;
    }
    Ok((loss / case.inputs.len() as f64, signs, closest))
}

/// Parameters drawn by [`init_params`] and then moved to a generic
/// unit-scale point, which also takes biases and norm parameters away from
/// their exact zero/one initial values.
fn jittered_params(config: &ModelConfig, seed: u64) -> Result<ModelParams<f64>> {
    let mut params = init_params(config, seed)?.cast::<f64>();
    let mut r = rng::stream(seed, Stream::GradCheck, &[0]);
    let noise = Normal::new(0.0, BASE_JITTER).expect("valid normal");
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += noise.sample(&mut r);
        }
    }
    Ok(params)
}

/// Compares analytic and central-difference gradients on [`PROBES`]
/// coordinates. Tensors are picked uniformly, then an element within.
pub fn finite_difference_check(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    config.validate()?;
    let case = build_case(seed)?;
    let mut params = jittered_params(config, seed)?;
    let (_, grads) = compute_gradients(&params, &case.batch())?;
    let (_, base_signs, closest) = evaluate(&params, &case)?;
    if closest < KINK_MARGIN {
        return Err(Error::Numerical { stage: "gradcheck: residual on the L1 kink at the base point", layer: None });
    }

    let names: Vec<String> = crate::vit::param_layout(config).into_iter().map(|s| s.name).collect();
    let mut r = rng::stream(seed, Stream::GradCheck, &[2]);
    let mut probes = Vec::with_capacity(PROBES);
    let mut skipped = 0;
    let max_attempts = PROBES * 100;
    for _ in 0..max_attempts {
        if probes.len() == PROBES {
            break;
        }
        let t = r.random_range(0..names.len());
        let len = params.tensors()[t].data.len();
        let i = r.random_range(0..len);
        let original = params.get(t, i);

        let mut values = Vec::with_capacity(STENCIL.len());
        let mut crossed = false;
        for &k in &STENCIL {
            params.set(t, i, original + k * STEP);
            let (l, signs, _) = evaluate(&params, &case)?;
            crossed |= signs != base_signs;
            values.push(l);
        }
        params.set(t, i, original);
        if crossed {
            skipped += 1;
            continue;
        }
        let numeric = (-values[0] + 8.0 * values[1] - 8.0 * values[2] + values[3]) / (12.0 * STEP);
        let analytic = grads.get(t, i);
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        probes.push(Probe { tensor: names[t].clone(), index: i, analytic, numeric, rel_error });
    }
    if probes.len() < PROBES {
        return Err(Error::Numerical { stage: "gradcheck: too many probes crossed an L1 kink", layer: None });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { probes, skipped_kinks: skipped, max_rel_error })
}
