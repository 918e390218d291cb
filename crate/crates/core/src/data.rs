//! Synthetic ultrasound-like samples, dataset manifests, and the
//! support/query pairing protocol.
//!
//! Each generated frame is a speckled soft-tissue background crossed by a
//! bright curved band (the "bone surface") with an acoustic shadow beneath
//! it. The ground-truth mask is exactly the set of band pixels.
//!
//! Pairing follows a fixed protocol:
//!
//! * training records are split into a support pool and a query pool of
//!   equal size (the support pool takes the extra record when odd);
//! * every query is paired with one support drawn from a shuffled support
//!   pool, cycling through it so no support repeats before all are used;
//! * each test record is paired with a support drawn uniformly from the
//!   validation split, so test queries never see test supports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng::{self, Stream};

pub const GENERATOR_VERSION: &str = "simicl-synth-1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MIN_SIDE: usize = 32;

/// Mask foreground fraction bounds every synthetic sample satisfies.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.30);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image_path: String,
    pub mask_path: String,
    pub subject_id: String,
    pub split: Split,
}

impl SampleRecord {
    pub fn load_image(&self, root: &Path) -> Result<Image> {
        Image::load_png(&root.join(&self.image_path))
    }

    pub fn load_mask(&self, root: &Path) -> Result<Mask> {
        Mask::load_png(&root.join(&self.mask_path))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePair {
    pub pair_id: String,
    pub support: SampleRecord,
    pub query: SampleRecord,
}

impl SamplePair {
    fn new(support: &SampleRecord, query: &SampleRecord) -> Self {
        SamplePair {
            pair_id: format!("{}~{}", query.sample_id, support.sample_id),
            support: support.clone(),
            query: query.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    version: String,
    created_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub created_seed: u64,
    pub generator_version: String,
}

impl Manifest {
    /// Builds a manifest, sorting records and checking the record invariants.
    pub fn new(mut records: Vec<SampleRecord>, created_seed: u64) -> Result<Self> {
        records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let manifest = Manifest { records, created_seed, generator_version: GENERATOR_VERSION.into() };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut subject_split: BTreeMap<&str, Split> = BTreeMap::new();
        for w in self.records.windows(2) {
            if w[0].sample_id >= w[1].sample_id {
                return Err(Error::format(
                    "manifest",
                    format!("sample ids not strictly sorted at `{}`", w[1].sample_id),
                ));
            }
        }
        for r in &self.records {
            if let Some(prev) = subject_split.insert(&r.subject_id, r.split) {
                if prev != r.split {
                    return Err(Error::format(
                        "manifest",
                        format!("subject `{}` spans {} and {}", r.subject_id, prev.as_str(), r.split.as_str()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<SampleRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }

    pub fn to_jsonl(&self) -> String {
        let header = ManifestHeader {
            version: self.generator_version.clone(),
            created_seed: self.created_seed,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: ManifestHeader = match lines.next() {
            Some(l) => serde_json::from_str(l).map_err(|e| Error::format("manifest header", e.to_string()))?,
            None => return Err(Error::format("manifest", "missing header line")),
        };
        let records = lines
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::format("manifest record", format!("line {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<SampleRecord>>>()?;
        let manifest = Manifest {
            records,
            created_seed: header.created_seed,
            generator_version: header.version,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    /// Keeps a seeded random `fraction` of each training subject's records
    /// (at least one per subject). Other splits pass through untouched.
    pub fn subset_train(&self, fraction: f64, seed: u64) -> Result<Manifest> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::ConfigRejected(format!("subset fraction {fraction} is outside (0, 1]")));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let mut by_subject: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.split == Split::Train) {
            by_subject.entry(&r.subject_id).or_default().push(r);
        }
        let mut keep: BTreeSet<&str> = BTreeSet::new();
        for (subject, mut recs) in by_subject {
            let n = ((recs.len() as f64 * fraction).round() as usize).max(1);
            let mut rng = rng::stream(seed, Stream::Subset, &[fnv1a(subject)]);
            recs.shuffle(&mut rng);
            keep.extend(recs[..n].iter().map(|r| r.sample_id.as_str()));
        }
        let records = self
            .records
            .iter()
            .filter(|r| r.split != Split::Train || keep.contains(r.sample_id.as_str()))
            .cloned()
            .collect();
        Ok(Manifest { records, created_seed: self.created_seed, generator_version: self.generator_version.clone() })
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Requested sample counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

struct ArcBand {
    vertex_x: f64,
    vertex_y: f64,
    curvature: f64,
    x_start: usize,
    x_end: usize,
    half_thickness: f64,
    intensity: f64,
    shadow: f64,
}

impl ArcBand {
    fn center(&self, x: f64) -> f64 {
        self.vertex_y + self.curvature * (x - self.vertex_x).powi(2)
    }

    fn covers_column(&self, x: usize) -> bool {
        x >= self.x_start && x < self.x_end
    }

    /// Signed vertical offset of a pixel centre from the band centre line.
    fn offset(&self, y: usize, x: usize) -> f64 {
        (y as f64 + 0.5) - self.center(x as f64 + 0.5)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with clamp-to-edge borders.
fn blur(field: &[f64], side: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, side as isize - 1) as usize;
    let mut tmp = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            tmp[y * side + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * field[y * side + clamp(x as isize + k as isize - r)])
                .sum();
        }
    }
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            out[y * side + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - r) * side + x])
                .sum();
        }
    }
    out
}

const SPECKLE_SIGMA: f64 = 1.5;
const SPECKLE_GAIN: f64 = 0.5;
/// Band half-thickness in pixels. A closed window of width below 9 covers
/// at most 9 pixel centres per column.
const HALF_THICKNESS: (f64, f64) = (3.0, 4.5);

/// Generates one synthetic frame and its exact band mask.
///
/// The output is a pure function of `(seed, index, side)`.
pub fn generate_synthetic_sample(seed: u64, index: u32, side: usize) -> Result<(Image, Mask)> {
    if side < MIN_SIDE {
        return Err(Error::InvalidDimension(format!("synthetic side {side} < {MIN_SIDE}")));
    }
    let s = side as f64;
    for attempt in 0u64.. {
        let mut rng = rng::stream(seed, Stream::Synthetic, &[index as u64, attempt]);
        let length = rng.random_range(0.95..1.0) * s;
        let x_start = rng.random_range(0.0..=(s - length)).floor() as usize;
        let band = ArcBand {
            vertex_x: rng.random_range(0.3..0.7) * s,
            vertex_y: rng.random_range(0.3..0.6) * s,
            curvature: rng.random_range(-0.6..0.6) / s,
            x_start,
            x_end: (x_start + length.round() as usize).min(side),
            half_thickness: rng.random_range(HALF_THICKNESS.0..HALF_THICKNESS.1),
            intensity: rng.random_range(0.85..0.95),
            shadow: rng.random_range(0.35..0.6),
        };
        let base = rng.random_range(0.22..0.32);

        let noise: Vec<f64> = (0..side * side).map(|_| Exp1.sample(&mut rng)).collect();
        let speckle: Vec<f64> = blur(&noise, side, &gaussian_kernel(SPECKLE_SIGMA)).into_iter().map(|v| 1.0 + SPECKLE_GAIN * (v - 1.0)).collect();

        let mask = Mask::from_fn(side, side, |y, x| {
            band.covers_column(x) && band.offset(y, x).abs() <= band.half_thickness
        });
        let fraction = mask.fraction();
        if !(FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&fraction) {
            continue;
        }

        let image = Image::from_fn(side, side, |y, x| {
            let tissue = if mask.get(y, x) {
                band.intensity
            } else {
                let attenuated = base * (1.0 - 0.35 * (y as f64 + 0.5) / s);
                if band.covers_column(x) && band.offset(y, x) > band.half_thickness {
                    attenuated * band.shadow
                } else {
                    attenuated
                }
            };
            (tissue * speckle[y * side + x]).clamp(0.0, 1.0) as f32
        });
        return Ok((image, mask));
    }
    unreachable!("attempt counter is unbounded")
}

/// Splits `n` frames into consecutive subject runs of 3-10 frames where the
/// count allows it.
fn subject_runs(n: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut remaining = n;
    while remaining > 0 {
        let mut len = rng.random_range(3..=10usize).min(remaining);
        let rest = remaining - len;
        if rest > 0 && rest < 3 {
            len = if remaining <= 10 { remaining } else { remaining - 3 };
        }
        runs.push(len);
        remaining -= len;
    }
    runs
}

/// Generates every split, writes PNGs under `out_dir/{images,masks}` and the
/// manifest at `out_dir/manifest.jsonl`.
pub fn build_dataset(out_dir: &Path, counts: SplitCounts, seed: u64, side: usize) -> Result<Manifest> {
    if side < MIN_SIDE {
        return Err(Error::InvalidDimension(format!("synthetic side {side} < {MIN_SIDE}")));
    }
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut records = Vec::with_capacity(counts.total());
    let mut index = 0usize;
    let mut subject = 0usize;
    for split in Split::ALL {
        let mut rng = rng::stream(seed, Stream::Synthetic, &[u64::MAX, split as u64]);
        for run in subject_runs(counts.get(split), &mut rng) {
            for _ in 0..run {
                let sample_id = format!("s{index:06}");
                records.push(SampleRecord {
                    image_path: format!("images/{sample_id}.png"),
                    mask_path: format!("masks/{sample_id}.png"),
                    sample_id,
                    subject_id: format!("subject{subject:04}"),
                    split,
                });
                index += 1;
            }
            subject += 1;
        }
    }

    records.par_iter().enumerate().try_for_each(|(i, r)| -> Result<()> {
        let (image, mask) = generate_synthetic_sample(seed, i as u32, side)?;
        image.save_png(&out_dir.join(&r.image_path))?;
        mask.save_png(&out_dir.join(&r.mask_path))
    })?;

    let manifest = Manifest::new(records, seed)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Partitions the training split into (support pool, query pool).
pub fn split_pools(manifest: &Manifest, seed: u64) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let mut train = manifest.split(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut rng = rng::stream(seed, Stream::Pools, &[]);
    train.shuffle(&mut rng);
    let query = train.split_off(train.len().div_ceil(2));
    let mut support = train;
    let mut query = query;
    support.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    query.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok((support, query))
}

/// One pair per query; supports come from a shuffled support pool, cycled.
pub fn pair_training(support_pool: &[SampleRecord], query_pool: &[SampleRecord], seed: u64) -> Result<Vec<SamplePair>> {
    if support_pool.is_empty() {
        return Err(Error::EmptyPool("support"));
    }
    if query_pool.is_empty() {
        return Err(Error::EmptyPool("query"));
    }
    let mut order: Vec<&SampleRecord> = support_pool.iter().collect();
    order.shuffle(&mut rng::stream(seed, Stream::TrainPairing, &[]));
    Ok(query_pool
        .iter()
        .enumerate()
        .map(|(i, q)| SamplePair::new(order[i % order.len()], q))
        .collect())
}

/// Pairs each test record with a uniformly drawn validation support.
pub fn pair_eval(test_records: &[SampleRecord], validation_records: &[SampleRecord], seed: u64) -> Result<Vec<SamplePair>> {
    if test_records.is_empty() {
        return Err(Error::EmptyPool("test"));
    }
    if validation_records.is_empty() {
        return Err(Error::EmptyPool("validation"));
    }
    test_records
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let candidates: Vec<&SampleRecord> =
                validation_records.iter().filter(|s| s.sample_id != q.sample_id).collect();
            if candidates.is_empty() {
                return Err(Error::EmptyPool("validation"));
            }
            let mut rng = rng::stream(seed, Stream::EvalPairing, &[i as u64]);
            let pick = candidates[rng.random_range(0..candidates.len())];
            Ok(SamplePair::new(pick, q))
        })
        .collect()
}

pub fn save_pairs(path: &Path, pairs: &[SamplePair]) -> Result<()> {
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, p).expect("pair serializes");
        out.write_all(b"\n").expect("vec write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: &Path) -> Result<Vec<SamplePair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format("pairs file", format!("line {}: {e}", i + 1))))
        .collect()
}

/// Loaded pixels of one pair, ready for composition.
#[derive(Clone, Debug)]
pub struct PairImages {
    pub pair_id: String,
    pub support_image: Image,
    pub support_mask: Mask,
    pub query_image: Image,
    pub query_mask: Mask,
}

impl PairImages {
    pub fn load(pair: &SamplePair, root: &Path) -> Result<Self> {
        Ok(PairImages {
            pair_id: pair.pair_id.clone(),
            support_image: pair.support.load_image(root)?,
            support_mask: pair.support.load_mask(root)?,
            query_image: pair.query.load_image(root)?,
            query_mask: pair.query.load_mask(root)?,
        })
    }

    /// Builds pair pixels directly from the generator, skipping the filesystem.
    pub fn synthetic(seed: u64, support_index: u32, query_index: u32, side: usize) -> Result<Self> {
        let (support_image, support_mask) = generate_synthetic_sample(seed, support_index, side)?;
        let (query_image, query_mask) = generate_synthetic_sample(seed, query_index, side)?;
        Ok(PairImages {
            pair_id: format!("s{query_index:06}~s{support_index:06}"),
            support_image,
            support_mask,
            query_image,
            query_mask,
        })
    }
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST_FILE)
}
