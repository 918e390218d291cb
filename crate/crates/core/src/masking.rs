//! Patch masks over the 14×14 token grid and the pixel regions the
//! reconstruction loss is averaged over.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Quadrant, COMPOSITE_SIDE};
use crate::rng::{self, Stream};

pub const PATCH_SIDE: usize = 16;

/// Training ratios swept in the loss-region ablation.
pub const TABLE_RATIOS: [f32; 5] = [0.0, 0.3, 0.45, 0.6, 0.75];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_side: usize,
    pub patch_side: usize,
}

impl Default for PatchGrid {
    fn default() -> Self {
        PatchGrid { image_side: COMPOSITE_SIDE, patch_side: PATCH_SIDE }
    }
}

impl PatchGrid {
    pub fn new(image_side: usize, patch_side: usize) -> Result<Self> {
        if patch_side == 0 || !image_side.is_multiple_of(patch_side) {
            return Err(Error::InvalidDimension(format!(
                "image side {image_side} is not a multiple of patch side {patch_side}"
            )));
        }
        Ok(PatchGrid { image_side, patch_side })
    }

    pub fn side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn n_patches(&self) -> usize {
        self.side() * self.side()
    }

    /// Pixel rectangle `(top, left, side)` of patch `index` (row-major).
    pub fn patch_rect(&self, index: usize) -> (usize, usize, usize) {
        let s = self.side();
        ((index / s) * self.patch_side, (index % s) * self.patch_side, self.patch_side)
    }

    /// Number of patches masked at `ratio`: `round(ratio * n)`, half away from zero.
    pub fn masked_count(&self, ratio: f32) -> usize {
        (ratio as f64 * self.n_patches() as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    masked: Vec<bool>,
    pub ratio_requested: f32,
}

impl PatchMask {
    pub fn from_bools(masked: Vec<bool>, ratio_requested: f32) -> Self {
        PatchMask { masked, ratio_requested }
    }

    pub fn none(grid: &PatchGrid) -> Self {
        PatchMask { masked: vec![false; grid.n_patches()], ratio_requested: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked[patch]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.masked
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// `0`/`1` string, one character per patch, row-major.
    pub fn to_bit_string(&self) -> String {
        self.masked.iter().map(|&m| if m { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        let masked = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::format("patch mask", format!("unexpected character {other:?}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        let n = masked.len().max(1) as f32;
        let ratio = masked.iter().filter(|&&m| m).count() as f32 / n;
        Ok(PatchMask { masked, ratio_requested: ratio })
    }
}

fn check_ratio(ratio: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    Ok(())
}

/// Masks exactly `round(ratio * n)` patches, uniformly without replacement.
pub fn sample_mask(grid: &PatchGrid, ratio: f32, seed: u64) -> Result<PatchMask> {
    check_ratio(ratio)?;
    let mut rng = rng::stream(seed, Stream::PatchMask, &[]);
    Ok(sample_mask_with(grid, ratio, &mut rng))
}

pub(crate) fn sample_mask_with(grid: &PatchGrid, ratio: f32, rng: &mut rng::Rng) -> PatchMask {
    let n = grid.n_patches();
    let k = grid.masked_count(ratio).min(n);
    let mut masked = vec![false; n];
    for i in rand::seq::index::sample(rng, n, k) {
        masked[i] = true;
    }
    PatchMask { masked, ratio_requested: ratio }
}

/// Masks every patch inside the query-target quadrant and nothing else.
pub fn inference_mask(grid: &PatchGrid) -> PatchMask {
    let (top, left, h, w) = Quadrant::QueryTarget.rect();
    let masked = (0..grid.n_patches())
        .map(|i| {
            let (py, px, s) = grid.patch_rect(i);
            py >= top && px >= left && py + s <= top + h && px + s <= left + w
        })
        .collect::<Vec<_>>();
    let ratio = masked.iter().filter(|&&m| m).count() as f32 / grid.n_patches() as f32;
    PatchMask { masked, ratio_requested: ratio }
}

/// Which pixels of the composite the reconstruction loss covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossVariant {
    /// Pixels of masked patches only.
    MaskedAreas,
    /// The whole canvas.
    AllAreas,
    /// Both mask quadrants (support mask and query target).
    SegmentationQuadrants,
    /// The query-target quadrant only.
    TargetQuadrant,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::MaskedAreas,
        LossVariant::AllAreas,
        LossVariant::SegmentationQuadrants,
        LossVariant::TargetQuadrant,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            LossVariant::MaskedAreas => "masked",
            LossVariant::AllAreas => "all",
            LossVariant::SegmentationQuadrants => "segquads",
            LossVariant::TargetQuadrant => "target",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.cli_name() == s)
            .ok_or_else(|| Error::format("loss variant", format!("`{s}` (expected masked|all|segquads|target)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossRegion {
    pub variant: LossVariant,
    pixels: Vec<bool>,
    count: usize,
}

impl LossRegion {
    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn contains(&self, y: usize, x: usize, side: usize) -> bool {
        self.pixels[y * side + x]
    }
}

pub fn loss_pixel_region(variant: LossVariant, patch_mask: &PatchMask, grid: &PatchGrid) -> Result<LossRegion> {
    if patch_mask.len() != grid.n_patches() {
        return Err(Error::InvalidDimension(format!(
            "patch mask has {} entries for a {}-patch grid",
            patch_mask.len(),
            grid.n_patches()
        )));
    }
    let side = grid.image_side;
    let mut pixels = vec![false; side * side];
    match variant {
        LossVariant::MaskedAreas => {
            for (i, _) in patch_mask.as_slice().iter().enumerate().filter(|(_, &m)| m) {
                let (top, left, s) = grid.patch_rect(i);
                for y in top..top + s {
                    pixels[y * side + left..y * side + left + s].fill(true);
                }
            }
        }
        LossVariant::AllAreas => pixels.fill(true),
        LossVariant::SegmentationQuadrants | LossVariant::TargetQuadrant => {
            let quads: &[Quadrant] = if variant == LossVariant::TargetQuadrant {
                &[Quadrant::QueryTarget]
            } else {
                &[Quadrant::SupportMask, Quadrant::QueryTarget]
            };
            for q in quads {
                let (top, left, h, w) = q.rect();
                for y in top..top + h {
                    pixels[y * side + left..y * side + left + w].fill(true);
                }
            }
        }
    }
    let count = pixels.iter().filter(|&&p| p).count();
    if count == 0 {
        return Err(Error::EmptyLossRegion(variant));
    }
    Ok(LossRegion { variant, pixels, count })
}
