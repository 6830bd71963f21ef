//! Command line front end: dataset splits, synthetic data, the two training
//! stages, evaluation, detection, and silhouette extraction.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `--profile` preset, the `--config` file, explicit flags. The merged
//! document is written as `effective_config.json` next to every run's
//! outputs, so a run is reproducible from that file plus the input data.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 runtime
//! failure.

use std::fs;
use std::io::{self, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use semiline::data::{
    extract_lines_from_mask, load_manifest, load_mask_png, load_image_png, make_split,
    resolve_path, save_image_png, save_manifest, save_split, synth_line_dataset, DatasetManifest,
    ExtractParams, Role, Sample, SplitFraction, SplitSpec, SynthParams,
};
use semiline::encoding::{decode_lines, FeatureMaps};
use semiline::error::ErrorCategory;
use semiline::geometry::{
    apply_transform, rasterize, GeomTransform, LineSegment, Point, MIN_CLIPPED_LEN,
};
use semiline::nn::ModelConfig;
use semiline::train::{
    evaluate, load_checkpoint, load_dataset, save_checkpoint, train_semi, train_supervised,
    Checkpoint, EpochRecord, LoadedDataset, TrainConfig,
};
use semiline::{Error, Result};

/// Stroke width of rendered detections, px. Purely cosmetic.
const OVERLAY_THICKNESS: f64 = 2.0;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// The complete run document: model, stage hyperparameters (with their
/// augmentation, loss, codec, and metric blocks), and dataset locations.
/// Every field has a default; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    schema_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {}, this build reads {}",
                self.schema_version, CONFIG_SCHEMA_VERSION
            )));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

/// Filesystem inputs of a run. Paths resolve relative to the working
/// directory, not the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataConfig {
    train_manifest: Option<PathBuf>,
    val_manifest: Option<PathBuf>,
    /// Labeled/unlabeled partition of the train manifest.
    split: Option<PathBuf>,
    /// Separate unlabeled pool; mutually exclusive with `split`.
    unlabeled_manifest: Option<PathBuf>,
    /// Supervised checkpoint that seeds the semi stage.
    warm_checkpoint: Option<PathBuf>,
}

#[derive(Parser)]
#[command(
    name = "semiline",
    version,
    about = "Semi-supervised line segment detection toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Partition a manifest into labeled/unlabeled splits, one per fraction.
    MakeSplits(MakeSplitsArgs),
    /// Generate a synthetic line dataset: images plus a labeled manifest.
    Synth(SynthArgs),
    /// Run one training stage and write checkpoint, log, and config.
    Train(TrainArgs),
    /// Score a checkpoint against a labeled manifest.
    Eval(EvalArgs),
    /// Detect segments in images and write them as a manifest.
    Detect(DetectArgs),
    /// Extract silhouette segments from binary masks into a manifest.
    ExtractLines(ExtractLinesArgs),
}

#[derive(clap::Args)]
struct MakeSplitsArgs {
    /// Dataset manifest to partition.
    manifest: PathBuf,
    /// Output directory for the split files.
    #[arg(long)]
    out: PathBuf,
    /// Labeled fractions, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1/16,1/8,1/4,1/2")]
    fractions: Vec<String>,
    /// Shuffle seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Number of images to generate.
    #[arg(long)]
    n: usize,
    /// Square image side, px.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Output directory for manifest.json and images/.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Role recorded in the manifest.
    #[arg(long, value_enum, default_value_t = RoleArg::Train)]
    role: RoleArg,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Which stage to run.
    #[arg(value_enum)]
    stage: Stage,
    /// Run config JSON; missing fields fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint.json, train_log.jsonl,
    /// effective_config.json.
    #[arg(long)]
    out: PathBuf,
    /// Model preset applied before the config file.
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.threads; 0 uses all cores, 1 is strictly serial.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides data.train_manifest.
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    /// Overrides data.val_manifest.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Overrides data.split.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Overrides data.unlabeled_manifest.
    #[arg(long)]
    unlabeled_manifest: Option<PathBuf>,
    /// Overrides data.warm_checkpoint (semi stage only).
    #[arg(long)]
    warm: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled manifest to score against.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for eval_report.json.
    #[arg(long)]
    out: PathBuf,
    /// Overrides for the checkpoint's decode/eval blocks.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(clap::Args)]
struct DetectArgs {
    /// Checkpoint to run.
    #[arg(long)]
    checkpoint: PathBuf,
    /// One png image or a directory of them.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for detections.json and overlays/.
    #[arg(long)]
    out: PathBuf,
    /// Also render each image with its detections drawn on.
    #[arg(long)]
    overlay: bool,
    /// Overrides for the checkpoint's decode block.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ExtractLinesArgs {
    /// Directory of binary mask pngs.
    masks: PathBuf,
    /// Output directory for extracted.json.
    #[arg(long)]
    out: PathBuf,
    /// Polyline simplification tolerance, px.
    #[arg(long, default_value_t = ExtractParams::default().epsilon)]
    epsilon: f64,
    /// Shortest edge worth keeping, px.
    #[arg(long, default_value_t = ExtractParams::default().min_length)]
    min_length: f64,
    /// Keep edges lying along the image frame.
    #[arg(long)]
    keep_border: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Supervised,
    Semi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    /// CPU-friendly model: 128 px input, narrow backbone.
    Desk,
    /// Full-size model: 512 px input, parameter budget 600k.
    Reference,
}

impl Profile {
    fn model(self) -> ModelConfig {
        match self {
            Profile::Desk => ModelConfig::desk(),
            Profile::Reference => ModelConfig::reference(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RoleArg {
    Train,
    Val,
    Test,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Train => Role::Train,
            RoleArg::Val => Role::Val,
            RoleArg::Test => Role::Test,
        }
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Cmd::MakeSplits(args) => cmd_make_splits(args),
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Detect(args) => cmd_detect(args),
        Cmd::ExtractLines(args) => cmd_extract_lines(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e.category() {
                ErrorCategory::Usage => 1,
                ErrorCategory::Data => 2,
                ErrorCategory::Runtime => 3,
            }
        }
    }
}

/// Builds the effective config: defaults, then the profile's model preset,
/// then the config file (deep-merged per field), then flag overrides.
fn load_run_config(
    config: Option<&Path>,
    profile: Option<Profile>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<RunConfig> {
    let mut base = RunConfig::default();
    if let Some(p) = profile {
        base.model = p.model();
    }
    let mut cfg = match config {
        None => base,
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let overlay: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
            let mut doc = serde_json::to_value(&base)
                .map_err(|e| Error::Config(format!("config defaults: {e}")))?;
            deep_merge(&mut doc, &overlay);
            serde_json::from_value(doc)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?
        }
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(t) = threads {
        cfg.train.threads = t;
    }
    Ok(cfg)
}

/// Recursively merges `over` into `base`: objects merge per key, everything
/// else replaces. Keys unknown to the schema survive the merge and fail the
/// typed parse afterwards.
fn deep_merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn cmd_make_splits(args: MakeSplitsArgs) -> Result<()> {
    let fractions: Vec<SplitFraction> =
        args.fractions.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    let manifest = load_manifest(&args.manifest)?;
    create_out_dir(&args.out)?;
    for fraction in fractions {
        let split = make_split(&manifest, fraction, args.seed);
        let tag = fraction.to_string().replace('/', "_");
        let path = args.out.join(format!("split_{tag}.json"));
        save_split(&path, &split)?;
        info!(
            "split {fraction}: {} labeled, {} unlabeled -> {}",
            split.labeled_ids.len(),
            split.unlabeled_ids.len(),
            path.display()
        );
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let (manifest, images) =
        synth_line_dataset(args.n, args.size, args.seed, args.role.into(), &SynthParams::default())?;
    create_out_dir(&args.out.join("images"))?;
    let manifest_path = args.out.join("manifest.json");
    for (sample, image) in manifest.samples.iter().zip(&images) {
        save_image_png(&resolve_path(&manifest_path, &sample.image_path), image)?;
    }
    save_manifest(&manifest_path, &manifest)?;
    info!("{} images -> {}", images.len(), args.out.display());
    Ok(())
}

/// Appends one epoch record per line; write failures surface when the stage
/// finishes, since the training callback cannot carry them.
struct EpochLog {
    writer: BufWriter<fs::File>,
    path: PathBuf,
    err: Option<io::Error>,
}

impl EpochLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(EpochLog { writer: BufWriter::new(file), path, err: None })
    }

    fn push(&mut self, record: &EpochRecord) {
        if self.err.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("epoch records always serialize");
        if let Err(e) = writeln!(self.writer, "{line}") {
            self.err = Some(e);
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.err.take() {
            return Err(Error::io(&self.path, e));
        }
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(args.config.as_deref(), args.profile, args.seed, args.threads)?;
    for (slot, flag) in [
        (&mut cfg.data.train_manifest, args.train_manifest),
        (&mut cfg.data.val_manifest, args.val_manifest),
        (&mut cfg.data.split, args.split),
        (&mut cfg.data.unlabeled_manifest, args.unlabeled_manifest),
        (&mut cfg.data.warm_checkpoint, args.warm),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    // The semi stage continues the warm checkpoint's network, so its model
    // block is the effective one.
    let warm = match args.stage {
        Stage::Supervised => None,
        Stage::Semi => {
            let path = cfg.data.warm_checkpoint.clone().ok_or_else(|| {
                Error::Config("stage semi needs a warm checkpoint (--warm or data.warm_checkpoint)".into())
            })?;
            let checkpoint = load_checkpoint(&path)?;
            cfg.model = checkpoint.model.clone();
            Some(checkpoint)
        }
    };
    cfg.validate()?;
    create_out_dir(&args.out)?;
    write_json_pretty(&args.out.join("effective_config.json"), &cfg)?;

    let train_path = cfg
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| Error::Config("data.train_manifest is required".into()))?;
    let val_path = cfg
        .data
        .val_manifest
        .clone()
        .ok_or_else(|| Error::Config("data.val_manifest is required".into()))?;
    let train_full = load_dataset(&load_manifest(&train_path)?, &train_path, cfg.model.input_size)?;
    let val = load_dataset(&load_manifest(&val_path)?, &val_path, cfg.model.input_size)?;

    let mut log = EpochLog::create(args.out.join("train_log.jsonl"))?;
    let stage_name = match args.stage {
        Stage::Supervised => "supervised",
        Stage::Semi => "semi",
    };
    let epochs = match args.stage {
        Stage::Supervised => cfg.train.epochs_supervised,
        Stage::Semi => cfg.train.epochs_semi,
    };
    let on_epoch = |r: &EpochRecord| {
        log.push(r);
        info!(
            "{stage_name} epoch {}/{epochs}: total {:.4}, val sAP10 {:.4}, F^H {:.4}",
            r.epoch,
            r.losses.get("total").copied().unwrap_or(f64::NAN),
            r.val_sap10,
            r.val_fh
        );
    };

    let checkpoint = match args.stage {
        Stage::Supervised => {
            let labeled = labeled_part(&train_full, cfg.data.split.as_deref())?;
            train_supervised(&labeled, &val, &cfg.model, &cfg.train, on_epoch)?
        }
        Stage::Semi => {
            let warm = warm.expect("loaded above for the semi stage");
            let (labeled, unlabeled) = semi_parts(&train_full, &cfg)?;
            train_semi(&warm, &labeled, &unlabeled, &val, &cfg.train, on_epoch)?
        }
    };
    log.finish()?;
    let checkpoint_path = args.out.join("checkpoint.json");
    save_checkpoint(&checkpoint, &checkpoint_path)?;
    info!(
        "best epoch {}: sAP10 {:.4}, F^H {:.4} -> {}",
        checkpoint.epoch,
        checkpoint.val_sap10,
        checkpoint.val_fh,
        checkpoint_path.display()
    );
    Ok(())
}

/// The labeled side of a training run: the whole manifest, or the split's
/// labeled ids.
fn labeled_part(train: &LoadedDataset, split: Option<&Path>) -> Result<LoadedDataset> {
    match split {
        None => Ok(train.clone()),
        Some(path) => {
            let spec: SplitSpec = semiline::data::load_split(path)?;
            train.subset(&spec.labeled_ids)
        }
    }
}

/// Labeled and unlabeled pools of the semi stage. A split takes both sides
/// from the train manifest; an unlabeled manifest supplies the pool
/// separately. Labels in the unlabeled pool are dropped either way.
fn semi_parts(train: &LoadedDataset, cfg: &RunConfig) -> Result<(LoadedDataset, LoadedDataset)> {
    match (&cfg.data.split, &cfg.data.unlabeled_manifest) {
        (Some(_), Some(_)) => Err(Error::Config(
            "give either data.split or data.unlabeled_manifest, not both".into(),
        )),
        (Some(path), None) => {
            let spec = semiline::data::load_split(path)?;
            let labeled = train.subset(&spec.labeled_ids)?;
            let unlabeled = train.subset(&spec.unlabeled_ids)?.strip_labels();
            Ok((labeled, unlabeled))
        }
        (None, Some(path)) => {
            let pool = load_dataset(&load_manifest(path)?, path, cfg.model.input_size)?;
            Ok((train.clone(), pool.strip_labels()))
        }
        (None, None) => Err(Error::Config(
            "stage semi needs data.split or data.unlabeled_manifest".into(),
        )),
    }
}

/// Merged config for commands that run an existing checkpoint: the
/// checkpoint's own blocks are the base, and the model block always stays
/// the checkpoint's, since the stored parameters fit no other.
fn checkpoint_config(
    checkpoint: &Checkpoint,
    config: Option<&Path>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<RunConfig> {
    let mut base = RunConfig::default();
    base.model = checkpoint.model.clone();
    base.train = checkpoint.train.clone();
    let mut cfg = match config {
        None => base,
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let overlay: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
            let mut doc = serde_json::to_value(&base)
                .map_err(|e| Error::Config(format!("config defaults: {e}")))?;
            deep_merge(&mut doc, &overlay);
            serde_json::from_value(doc)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?
        }
    };
    cfg.model = checkpoint.model.clone();
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(t) = threads {
        cfg.train.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn worker_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads == 0 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let cfg = checkpoint_config(&checkpoint, args.config.as_deref(), args.seed, args.threads)?;
    let net = checkpoint.build_net()?;
    let data = load_dataset(&load_manifest(&args.manifest)?, &args.manifest, cfg.model.input_size)?;
    let report = match worker_pool(cfg.train.threads)? {
        Some(pool) => pool.install(|| evaluate(&net, &data, &cfg.train.decode, &cfg.train.eval))?,
        None => evaluate(&net, &data, &cfg.train.decode, &cfg.train.eval)?,
    };
    create_out_dir(&args.out)?;
    write_json_pretty(&args.out.join("effective_config.json"), &cfg)?;
    let report_path = args.out.join("eval_report.json");
    write_json_pretty(&report_path, &report)?;
    info!(
        "sAP10 {:.4}, F^H {:.4} over {} images -> {}",
        report.sap.get("10").copied().unwrap_or(f64::NAN),
        report.f_h,
        report.n_images,
        report_path.display()
    );
    Ok(())
}

/// The input's png files: the file itself, or the directory's entries in
/// name order.
fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !fs::metadata(input).map_err(|e| Error::io(input, e))?.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut paths = Vec::new();
    for entry in fs::read_dir(input).map_err(|e| Error::io(input, e))? {
        let path = entry.map_err(|e| Error::io(input, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

/// Path string stored in output manifests: absolute, so the manifest reads
/// back from anywhere.
fn manifest_path_string(path: &Path) -> Result<String> {
    let abs = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
    Ok(abs.to_string_lossy().into_owned())
}

fn scale_segments(lines: &[LineSegment], sx: f64, sy: f64) -> Result<Vec<LineSegment>> {
    lines
        .iter()
        .map(|l| {
            let seg = LineSegment::new(
                Point::new(l.start.x * sx, l.start.y * sy),
                Point::new(l.end.x * sx, l.end.y * sy),
            )?;
            match l.score {
                Some(s) => seg.with_score(s),
                None => Ok(seg),
            }
        })
        .collect()
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let cfg = checkpoint_config(&checkpoint, args.config.as_deref(), None, None)?;
    let net = checkpoint.build_net()?;
    let size = cfg.model.input_size as f64;
    let paths = png_inputs(&args.input)?;
    if paths.is_empty() {
        warn!("no png images under {}", args.input.display());
    }
    create_out_dir(&args.out)?;
    if args.overlay {
        create_out_dir(&args.out.join("overlays"))?;
    }
    let mut samples = Vec::with_capacity(paths.len());
    for path in &paths {
        let image = load_image_png(path)?;
        let (_, h, w) = image.dim();
        let t = GeomTransform::CropResize {
            window: [0.0, 0.0, w as f64, h as f64],
            dst: (size, size),
        };
        let (resized, _) = apply_transform(&t, &image, &[], MIN_CLIPPED_LEN)?;
        // Byte quantization, matching what training saw after dataset
        // loading.
        let input = resized.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        let (y, _) = net.forward(&input)?;
        let maps = FeatureMaps::new(y)?;
        let decoded = decode_lines(&maps, &cfg.train.decode);
        let (mh, mw) = (maps.height() as f64, maps.width() as f64);
        let lines = scale_segments(&decoded, w as f64 / mw, h as f64 / mh)?;
        info!("{}: {} segments", path.display(), lines.len());
        if args.overlay {
            save_image_png(&args.out.join("overlays").join(format!("{}.png", file_stem(path))), &draw_overlay(&image, &lines))?;
        }
        samples.push(Sample {
            image_id: file_stem(path),
            image_path: manifest_path_string(path)?,
            width: w as u32,
            height: h as u32,
            lines: Some(lines),
        });
    }
    let manifest = DatasetManifest { name: "detections".into(), role: Role::Test, samples };
    let manifest_path = args.out.join("detections.json");
    save_manifest(&manifest_path, &manifest)?;
    info!("{} images -> {}", manifest.samples.len(), manifest_path.display());
    Ok(())
}

/// The image with detections drawn in red at full opacity.
fn draw_overlay(image: &Array3<f64>, lines: &[LineSegment]) -> Array3<f64> {
    let (_, h, w) = image.dim();
    let mask = rasterize(lines, h, w, OVERLAY_THICKNESS);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                out[[0, y, x]] = 1.0;
                out[[1, y, x]] = 0.0;
                out[[2, y, x]] = 0.0;
            }
        }
    }
    out
}

fn cmd_extract_lines(args: ExtractLinesArgs) -> Result<()> {
    let params = ExtractParams {
        epsilon: args.epsilon,
        min_length: args.min_length,
        exclude_border: !args.keep_border,
    };
    let paths = png_inputs(&args.masks)?;
    if paths.is_empty() {
        warn!("no png masks under {}", args.masks.display());
    }
    let mut samples = Vec::with_capacity(paths.len());
    for path in &paths {
        let mask = load_mask_png(path)?;
        let (h, w) = mask.dim();
        let lines = extract_lines_from_mask(&mask, &params);
        info!("{}: {} segments", path.display(), lines.len());
        samples.push(Sample {
            image_id: file_stem(path),
            image_path: manifest_path_string(path)?,
            width: w as u32,
            height: h as u32,
            lines: Some(lines),
        });
    }
    create_out_dir(&args.out)?;
    let manifest = DatasetManifest { name: "extracted".into(), role: Role::Train, samples };
    let manifest_path = args.out.join("extracted.json");
    save_manifest(&manifest_path, &manifest)?;
    info!("{} masks -> {}", manifest.samples.len(), manifest_path.display());
    Ok(())
}
