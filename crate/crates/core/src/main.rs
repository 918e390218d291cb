use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use simicl::config::{ConfigFile, SNAPSHOT_FILE};
use simicl::data::{
    build_dataset, load_pairs, manifest_path, pair_eval, pair_training, save_pairs, split_pools, Manifest, PairImages,
    SamplePair, Split, SplitCounts,
};
use simicl::eval::{evaluate_pairs, evaluate_single_image, predict_detailed, MetricsReport, DEFAULT_THRESHOLD};
use simicl::gradcheck::finite_difference_check;
use simicl::image::{Image, Mask};
use simicl::masking::LossVariant;
use simicl::train::{single_image_run, train_run, LabeledImage, TrainConfig, TrainHooks, TrainMode};
use simicl::vit::{Checkpoint, ModelConfig};
use simicl::{Error, Result};

const TRAIN_PAIRS: &str = "pairs_train.jsonl";
const EVAL_PAIRS: &str = "pairs_eval.jsonl";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "simicl",
    version,
    about = "Segmentation by masked reconstruction of support/query composites",
    after_help = "Environment:\n  SIMICL_THREADS  worker threads for per-sample work (results do not depend on it)"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest
    Synth(SynthArgs),
    /// Split training records into pools and write training and evaluation pairs
    Pair(PairArgs),
    /// Train a model on composites (or on single images with --mode single)
    Train(TrainArgs),
    /// Score a checkpoint on evaluation pairs
    Eval(EvalArgs),
    /// Segment one query and dump the composite, reconstruction and mask
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences
    Gradcheck(GradcheckArgs),
    /// Train and score every (mask ratio, loss region) cell and write a Dice grid
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Masked,
    All,
    Segquads,
    Target,
}

impl From<LossArg> for LossVariant {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Masked => LossVariant::MaskedAreas,
            LossArg::All => LossVariant::AllAreas,
            LossArg::Segquads => LossVariant::SegmentationQuadrants,
            LossArg::Target => LossVariant::TargetQuadrant,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Simicl,
    Single,
}

impl ModeArg {
    fn name(self) -> &'static str {
        match self {
            ModeArg::Simicl => "simicl",
            ModeArg::Single => "single",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        ModeArg::from_str(s, false).map_err(|_| Error::Format { what: "mode", detail: format!("`{s}` (expected simicl|single)") })
    }
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Flat `key = value` file; flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self, allowed: &[&str]) -> Result<ConfigFile> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        file.check_keys(allowed)?;
        Ok(file)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for images, masks and the manifest
    #[arg(long)]
    out: PathBuf,
    /// Generator seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Training frames [default: 64]
    #[arg(long)]
    train: Option<usize>,
    /// Validation frames [default: 16]
    #[arg(long)]
    validation: Option<usize>,
    /// Test frames [default: 16]
    #[arg(long)]
    test: Option<usize>,
    /// Frame side in pixels, at least 32 [default: 112]
    #[arg(long)]
    side: Option<usize>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct PairArgs {
    /// Dataset directory holding manifest.jsonl
    #[arg(long)]
    data: PathBuf,
    /// Pairing seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of training frames kept per subject before pooling [default: 1.0]
    #[arg(long)]
    subset_fraction: Option<f64>,
    /// Where the pair files go [default: the dataset directory]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Transformer blocks [default: 12]
    #[arg(long)]
    depth: Option<usize>,
    /// Token width [default: 768]
    #[arg(long)]
    dim: Option<usize>,
    /// Attention heads [default: 12]
    #[arg(long)]
    heads: Option<usize>,
}

impl ModelArgs {
    const KEYS: [&'static str; 3] = ["depth", "dim", "heads"];

    fn resolve(&self, file: &ConfigFile, snap: &mut ConfigFile) -> Result<ModelConfig> {
        let depth = file.resolve("depth", self.depth, 12)?;
        let dim = file.resolve("dim", self.dim, 768)?;
        let heads = file.resolve("heads", self.heads, 12)?;
        snap.set("depth", depth);
        snap.set("dim", dim);
        snap.set("heads", heads);
        let cfg = ModelConfig::toy(depth, dim, heads);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    /// Seed for initialization, masks and batch order [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Passes over the training pairs [default: 1200]
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many optimizer steps
    #[arg(long)]
    max_steps: Option<usize>,
    /// Samples per step [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,
    /// AdamW learning rate [default: 0.0005]
    #[arg(long)]
    lr: Option<f32>,
    /// AdamW decoupled weight decay [default: 0.05]
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Write an intermediate checkpoint every N steps, 0 for none [default: 0]
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl OptimArgs {
    const KEYS: [&'static str; 7] = ["seed", "epochs", "max_steps", "batch_size", "lr", "weight_decay", "checkpoint_every"];

    fn resolve(&self, file: &ConfigFile, snap: &mut ConfigFile) -> Result<(TrainConfig, usize)> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            seed: file.resolve("seed", self.seed, d.seed)?,
            epochs: file.resolve("epochs", self.epochs, d.epochs)?,
            max_steps: match self.max_steps {
                Some(v) => Some(v),
                None => file.get("max_steps")?,
            },
            batch_size: file.resolve("batch_size", self.batch_size, d.batch_size)?,
            learning_rate: file.resolve("lr", self.lr, d.learning_rate)?,
            weight_decay: file.resolve("weight_decay", self.weight_decay, d.weight_decay)?,
            ..d
        };
        let every = file.resolve("checkpoint_every", self.checkpoint_every, 0)?;
        snap.set("seed", cfg.seed);
        snap.set("epochs", cfg.epochs);
        if let Some(m) = cfg.max_steps {
            snap.set("max_steps", m);
        }
        snap.set("batch_size", cfg.batch_size);
        snap.set("lr", cfg.learning_rate);
        snap.set("weight_decay", cfg.weight_decay);
        snap.set("checkpoint_every", every);
        Ok((cfg, every))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Training pairs file [default: <data>/pairs_train.jsonl]
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Output directory for checkpoints, the step log and the config snapshot
    #[arg(long)]
    out: PathBuf,
    /// Training regime [default: simicl]
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Fraction of the 196 patches replaced by the mask token [default: 0.6]
    #[arg(long)]
    mask_ratio: Option<f32>,
    /// Pixels the L1 loss averages over [default: masked]
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Evaluation pairs file [default: <data>/pairs_eval.jsonl]
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Checkpoint to score
    #[arg(long)]
    checkpoint: PathBuf,
    /// How the checkpoint was trained [default: simicl]
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Binarization threshold on the clamped output [default: 0.5]
    #[arg(long)]
    threshold: Option<f32>,
    /// Seed for single-image test-time masks [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics.json, metrics.csv and the config snapshot
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Checkpoint to run
    #[arg(long)]
    checkpoint: PathBuf,
    /// Support image (8-bit grayscale PNG)
    #[arg(long)]
    support_image: PathBuf,
    /// Support mask (8-bit PNG, foreground >= 128)
    #[arg(long)]
    support_mask: PathBuf,
    /// Query image (8-bit grayscale PNG)
    #[arg(long)]
    query_image: PathBuf,
    /// Binarization threshold on the clamped output [default: 0.5]
    #[arg(long)]
    threshold: Option<f32>,
    /// Output directory for composite.png, reconstruction.png and mask.png
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Transformer blocks [default: 2]
    #[arg(long)]
    depth: Option<usize>,
    /// Token width [default: 32]
    #[arg(long)]
    dim: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    heads: Option<usize>,
    /// Seed for parameters, data and probe coordinates [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Optional directory for report.json and the config snapshot
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Dataset directory with pairs_train.jsonl and pairs_eval.jsonl
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated mask ratios [default: 0,0.3,0.45,0.6,0.75]
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f32>>,
    /// Comma-separated loss regions [default: masked,all,segquads,target]
    #[arg(long, value_delimiter = ',', value_enum)]
    losses: Option<Vec<LossArg>>,
    /// Binarization threshold on the clamped output [default: 0.5]
    #[arg(long)]
    threshold: Option<f32>,
    /// Output directory for dc_grid.csv, per-cell runs and the config snapshot
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    config: ConfigArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(if e.is_degenerate_config() { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Pair(a) => pair(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_snapshot(dir: &Path, snap: &ConfigFile) -> Result<()> {
    create_dir(dir)?;
    snap.save(&dir.join(SNAPSHOT_FILE))
}

fn synth(a: SynthArgs) -> Result<()> {
    let file = a.config.load(&["seed", "train", "validation", "test", "side"])?;
    let seed = file.resolve("seed", a.seed, 0u64)?;
    let counts = SplitCounts {
        train: file.resolve("train", a.train, 64)?,
        validation: file.resolve("validation", a.validation, 16)?,
        test: file.resolve("test", a.test, 16)?,
    };
    let side = file.resolve("side", a.side, 112)?;
    let manifest = build_dataset(&a.out, counts, seed, side)?;
    let mut snap = ConfigFile::default();
    snap.set("seed", seed);
    snap.set("train", counts.train);
    snap.set("validation", counts.validation);
    snap.set("test", counts.test);
    snap.set("side", side);
    write_snapshot(&a.out, &snap)?;
    println!("wrote {} records to {}", manifest.records.len(), manifest_path(&a.out).display());
    Ok(())
}

fn pair(a: PairArgs) -> Result<()> {
    let file = a.config.load(&["seed", "subset_fraction"])?;
    let seed = file.resolve("seed", a.seed, 0u64)?;
    let fraction = file.resolve("subset_fraction", a.subset_fraction, 1.0f64)?;
    let manifest = Manifest::load(&manifest_path(&a.data))?;
    let manifest = if fraction < 1.0 { manifest.subset_train(fraction, seed)? } else { manifest };
    let (support, query) = split_pools(&manifest, seed)?;
    let train = pair_training(&support, &query, seed)?;
    let eval = pair_eval(&manifest.split(Split::Test), &manifest.split(Split::Validation), seed)?;
    let out = a.out.unwrap_or_else(|| a.data.clone());
    create_dir(&out)?;
    save_pairs(&out.join(TRAIN_PAIRS), &train)?;
    save_pairs(&out.join(EVAL_PAIRS), &eval)?;
    let mut snap = ConfigFile::default();
    snap.set("seed", seed);
    snap.set("subset_fraction", fraction);
    write_snapshot(&out, &snap)?;
    println!(
        "support pool {}, query pool {}, {} training pairs, {} evaluation pairs",
        support.len(),
        query.len(),
        train.len(),
        eval.len()
    );
    Ok(())
}

fn load_pair_images(pairs: &[SamplePair], root: &Path) -> Result<Vec<PairImages>> {
    pairs.iter().map(|p| PairImages::load(p, root)).collect()
}

/// Every distinct frame of the pairs with its label, queries first.
fn labeled_frames(pairs: &[SamplePair], root: &Path, include_supports: bool) -> Result<Vec<LabeledImage>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    let records = pairs.iter().map(|p| &p.query).chain(pairs.iter().filter(|_| include_supports).map(|p| &p.support));
    for r in records {
        if seen.insert(r.sample_id.clone()) {
            out.push(LabeledImage { id: r.sample_id.clone(), image: r.load_image(root)?, mask: r.load_mask(root)? });
        }
    }
    Ok(out)
}

const TRAIN_KEYS: [&str; 13] = [
    "mode", "mask_ratio", "loss", "depth", "dim", "heads", "seed", "epochs", "max_steps", "batch_size", "lr",
    "weight_decay", "checkpoint_every",
];

struct ResolvedTrain {
    model: ModelConfig,
    train: TrainConfig,
    checkpoint_every: usize,
    snap: ConfigFile,
}

fn resolve_train(a: &TrainArgs) -> Result<ResolvedTrain> {
    let file = a.config.load(&TRAIN_KEYS)?;
    let mut snap = ConfigFile::default();
    let model = a.model.resolve(&file, &mut snap)?;
    let (mut train, checkpoint_every) = a.optim.resolve(&file, &mut snap)?;
    let mode = match a.mode {
        Some(m) => m,
        None => file.raw("mode").map(ModeArg::parse).transpose()?.unwrap_or(ModeArg::Simicl),
    };
    train.mode = match mode {
        ModeArg::Simicl => TrainMode::SimIcl,
        ModeArg::Single => TrainMode::Single,
    };
    train.mask_ratio = file.resolve("mask_ratio", a.mask_ratio, train.mask_ratio)?;
    train.loss_variant = match a.loss {
        Some(l) => l.into(),
        None => file.get::<LossVariant>("loss")?.unwrap_or(train.loss_variant),
    };
    if train.mode == TrainMode::Single {
        train.loss_variant = LossVariant::AllAreas;
    }
    snap.set("mode", mode.name());
    snap.set("mask_ratio", train.mask_ratio);
    snap.set("loss", train.loss_variant.cli_name());
    Ok(ResolvedTrain { model, train, checkpoint_every, snap })
}

fn train(a: TrainArgs) -> Result<()> {
    let r = resolve_train(&a)?;
    r.train.validate()?;
    let pairs_path = a.pairs.clone().unwrap_or_else(|| a.data.join(TRAIN_PAIRS));
    let pairs = load_pairs(&pairs_path)?;
    write_snapshot(&a.out, &r.snap)?;
    let progress_every = 50;
    let hooks = TrainHooks {
        out_dir: Some(a.out.clone()),
        checkpoint_every: r.checkpoint_every,
        on_step: Some(Box::new(move |s| {
            if s.step % progress_every == 0 {
                println!("step {} epoch {} loss {:.6}", s.step, s.epoch, s.loss);
            }
        })),
    };
    let (_, log) = match r.train.mode {
        TrainMode::SimIcl => train_run(&r.model, &r.train, &load_pair_images(&pairs, &a.data)?, hooks)?,
        TrainMode::Single => single_image_run(&r.model, &r.train, &labeled_frames(&pairs, &a.data, true)?, hooks)?,
    };
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        log.steps.len(),
        log.final_loss().unwrap_or(f64::NAN),
        a.out.join("final.ckpt").display()
    );
    Ok(())
}

fn check_threshold(t: f32) -> Result<f32> {
    if t > 0.0 && t < 1.0 {
        Ok(t)
    } else {
        Err(Error::ConfigRejected(format!("threshold {t} must lie strictly between 0 and 1")))
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let file = a.config.load(&["mode", "threshold", "seed"])?;
    let threshold = check_threshold(file.resolve("threshold", a.threshold, DEFAULT_THRESHOLD)?)?;
    let seed = file.resolve("seed", a.seed, 0u64)?;
    let mode = match a.mode {
        Some(m) => m,
        None => file.raw("mode").map(ModeArg::parse).transpose()?.unwrap_or(ModeArg::Simicl),
    };
    let mut snap = ConfigFile::default();
    snap.set("mode", mode.name());
    snap.set("threshold", threshold);
    snap.set("seed", seed);
    write_snapshot(&a.out, &snap)?;

    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let pairs = load_pairs(&a.pairs.clone().unwrap_or_else(|| a.data.join(EVAL_PAIRS)))?;
    let report = match mode {
        ModeArg::Simicl => evaluate_pairs(&checkpoint, &load_pair_images(&pairs, &a.data)?, threshold)?,
        ModeArg::Single => evaluate_single_image(&checkpoint, &labeled_frames(&pairs, &a.data, false)?, threshold, seed)?,
    };
    report.save(&a.out)?;
    println!("{}", report.summary_line());
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let file = a.config.load(&["threshold"])?;
    let threshold = check_threshold(file.resolve("threshold", a.threshold, DEFAULT_THRESHOLD)?)?;
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let support_image = Image::load_png(&a.support_image)?;
    let support_mask = Mask::load_png(&a.support_mask)?;
    let query_image = Image::load_png(&a.query_image)?;
    let p = predict_detailed(&checkpoint.params, &support_image, &support_mask, &query_image, threshold)?;
    let mut snap = ConfigFile::default();
    snap.set("threshold", threshold);
    write_snapshot(&a.out, &snap)?;
    p.composite.pixels().save_png(&a.out.join("composite.png"))?;
    p.reconstruction.save_png(&a.out.join("reconstruction.png"))?;
    p.mask.save_png(&a.out.join("mask.png"))?;
    println!("foreground pixels {} of {}", p.mask.count(), p.mask.data().len());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let file = a.config.load(&["depth", "dim", "heads", "seed"])?;
    let depth = file.resolve("depth", a.depth, 2usize)?;
    let dim = file.resolve("dim", a.dim, 32usize)?;
    let heads = file.resolve("heads", a.heads, 4usize)?;
    let seed = file.resolve("seed", a.seed, 0u64)?;
    let report = finite_difference_check(&ModelConfig::toy(depth, dim, heads), seed)?;
    if let Some(out) = &a.out {
        let mut snap = ConfigFile::default();
        snap.set("depth", depth);
        snap.set("dim", dim);
        snap.set("heads", heads);
        snap.set("seed", seed);
        write_snapshot(out, &snap)?;
        let path = out.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))
            .map_err(|e| Error::Io { path, source: e })?;
    }
    println!(
        "probes {} skipped kinks {} max relative error {:.3e}",
        report.probes.len(),
        report.skipped_kinks,
        report.max_rel_error
    );
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Error::Numerical { stage: "gradient check above tolerance", layer: None })
    }
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut keys = vec!["ratios", "losses", "threshold"];
    keys.extend(ModelArgs::KEYS);
    keys.extend(OptimArgs::KEYS);
    let file = a.config.load(&keys)?;
    let mut snap = ConfigFile::default();
    let model = a.model.resolve(&file, &mut snap)?;
    let (base, _) = a.optim.resolve(&file, &mut snap)?;
    let threshold = check_threshold(file.resolve("threshold", a.threshold, DEFAULT_THRESHOLD)?)?;
    let ratios: Vec<f32> = match &a.ratios {
        Some(r) => r.clone(),
        None => match file.raw("ratios") {
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<f32>().map_err(|e| Error::Format { what: "ratios", detail: e.to_string() }))
                .collect::<Result<_>>()?,
            None => simicl::masking::TABLE_RATIOS.to_vec(),
        },
    };
    let losses: Vec<LossVariant> = match &a.losses {
        Some(l) => l.iter().map(|&x| x.into()).collect(),
        None => match file.raw("losses") {
            Some(v) => v.split(',').map(|s| s.trim().parse::<LossVariant>()).collect::<Result<_>>()?,
            None => LossVariant::ALL.to_vec(),
        },
    };
    let join = |v: Vec<String>| v.join(",");
    snap.set("ratios", join(ratios.iter().map(|r| r.to_string()).collect()));
    snap.set("losses", join(losses.iter().map(|l| l.cli_name().to_string()).collect()));
    snap.set("threshold", threshold);
    write_snapshot(&a.out, &snap)?;

    let train_pairs = load_pair_images(&load_pairs(&a.data.join(TRAIN_PAIRS))?, &a.data)?;
    let eval_pairs = load_pair_images(&load_pairs(&a.data.join(EVAL_PAIRS))?, &a.data)?;

    let mut csv = format!("mask_ratio,{}\n", join(losses.iter().map(|l| l.cli_name().to_string()).collect()));
    for &ratio in &ratios {
        let mut row = vec![ratio.to_string()];
        for &loss in &losses {
            let cfg = TrainConfig { mask_ratio: ratio, loss_variant: loss, ..base.clone() };
            let cell = a.out.join(format!("r{ratio}_{}", loss.cli_name()));
            let hooks = TrainHooks { out_dir: Some(cell.clone()), ..Default::default() };
            match train_run(&model, &cfg, &train_pairs, hooks) {
                Ok((ck, _)) => {
                    let report: MetricsReport = evaluate_pairs(&ck, &eval_pairs, threshold)?;
                    report.save(&cell)?;
                    println!("ratio {ratio} loss {loss}: {}", report.summary_line());
                    row.push(format!("{:.6}", report.mean_dice));
                }
                Err(e) if e.is_degenerate_config() => {
                    println!("ratio {ratio} loss {loss}: skipped ({e})");
                    row.push("-".into());
                }
                Err(e) => return Err(e),
            }
        }
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    let path = a.out.join("dc_grid.csv");
    fs::write(&path, &csv).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    print!("{csv}");
    Ok(())
}
