//! Training stages and evaluation.
//!
//! Supervised warm-up optimizes the labeled loss alone; the semi-supervised
//! stage adds the confidence-gated consistency loss over unlabeled triples.
//! Both stages draw labeled batches and their augmentations from one rng
//! stream keyed only by the seed, so a semi run whose consistency gradients
//! vanish (gate never opens, or zero weight) replays the supervised
//! parameter trajectory bit for bit. Per-sample heavy lifting is data
//! parallel with an ordered reduction; results do not depend on thread
//! count, and `threads = 1` forces strictly serial execution.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{
    cutmix_axis, cutmix_square, make_unlabeled_triple, AugmentConfig, CutMixMode, MixMask,
};
use crate::data::{load_image_png, resolve_path, DatasetManifest, Role, Sample};
use crate::encoding::{decode_lines, encode_ground_truth, DecodeParams, EncodeParams, FeatureMaps};
use crate::error::{Error, Result};
use crate::geometry::{apply_transform, GeomTransform, LineSegment, MIN_CLIPPED_LEN};
use crate::losses::{
    consistency_loss_with_grad, labeled_loss_with_grad, ConsistencyLossBreakdown,
    LabeledLossBreakdown, LossParams,
};
use crate::metrics::{compute_report, scale_to_eval, EvalConfig, EvalReport};
use crate::nn::{build_model, Adam, LineNet, ModelConfig, NetGrads, DOWNSAMPLE};

/// Rng stream ids, disjoint per consumer so pipelines cannot disturb each
/// other's draws.
const STREAM_LABELED: u64 = 1;
const STREAM_UNLABELED: u64 = 2;

/// Stage hyperparameters. `tau` may exceed 1 (the gate then never opens);
/// everything else must be positive where a rate, non-negative where a
/// weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_supervised: f64,
    pub lr_semi: f64,
    /// Epochs past this index run at the stage rate times
    /// `lr_decay_factor`; 0 keeps the rate constant.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub epochs_supervised: usize,
    pub epochs_semi: usize,
    /// Confidence gate on the weak view's center channel.
    pub tau: f64,
    /// Weight of the consistency term in the semi stage.
    pub lambda_unlabeled: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,
    /// Two strong views per unlabeled sample; false keeps only the first.
    pub dual_strong: bool,
    pub cutmix: CutMixMode,
    /// Worker threads for per-sample work; 0 uses all cores, 1 is strictly
    /// serial.
    pub threads: usize,
    pub augment: AugmentConfig,
    pub loss: LossParams,
    pub encode: EncodeParams,
    pub decode: DecodeParams,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_supervised: 1e-3,
            lr_semi: 1e-4,
            lr_decay_epoch: 0,
            lr_decay_factor: 0.25,
            epochs_supervised: 300,
            epochs_semi: 100,
            tau: 0.7,
            lambda_unlabeled: 1.0,
            batch_labeled: 4,
            batch_unlabeled: 4,
            seed: 0,
            dual_strong: true,
            cutmix: CutMixMode::Axis,
            threads: 0,
            augment: AugmentConfig::default(),
            loss: LossParams::default(),
            encode: EncodeParams::default(),
            decode: DecodeParams::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_supervised", self.lr_supervised), ("lr_semi", self.lr_semi)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.lr_decay_factor.is_finite()
            || self.lr_decay_factor <= 0.0
            || self.lr_decay_factor > 1.0
        {
            return Err(Error::Config(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::Config(format!("tau must be finite and >= 0, got {}", self.tau)));
        }
        if !self.lambda_unlabeled.is_finite() || self.lambda_unlabeled < 0.0 {
            return Err(Error::Config(format!(
                "lambda_unlabeled must be >= 0, got {}",
                self.lambda_unlabeled
            )));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// One dataset image held in memory, resized to the model input and
/// quantized back to bytes (the on-disk representation).
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    /// 3 x S x S bytes.
    pub image: Array3<u8>,
    /// Segment labels in input-pixel coordinates, None when unlabeled.
    pub lines: Option<Vec<LineSegment>>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub name: String,
    pub role: Role,
    pub samples: Vec<LoadedSample>,
}

impl LoadedDataset {
    /// The subset with the given ids, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<LoadedDataset> {
        let mut samples = Vec::with_capacity(ids.len());
        for id in ids {
            let s = self
                .samples
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::Data(format!("unknown sample id {id:?}")))?;
            samples.push(s.clone());
        }
        Ok(LoadedDataset { name: self.name.clone(), role: self.role, samples })
    }

    /// The same images with every label removed, for use as the unlabeled
    /// pool of a split.
    pub fn strip_labels(&self) -> LoadedDataset {
        LoadedDataset {
            name: self.name.clone(),
            role: self.role,
            samples: self
                .samples
                .iter()
                .map(|s| LoadedSample { id: s.id.clone(), image: s.image.clone(), lines: None })
                .collect(),
        }
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.lines.is_some())
    }
}

pub fn image_to_f64(image: &Array3<u8>) -> Array3<f64> {
    image.mapv(|v| f64::from(v) / 255.0)
}

fn quantize(image: &Array3<f64>) -> Array3<u8> {
    image.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Resizes one image (and its labels) to the square model input.
fn prepare_sample(
    sample: &Sample,
    image: &Array3<f64>,
    input_size: usize,
) -> Result<LoadedSample> {
    let (_, h, w) = image.dim();
    let lines = sample.lines.clone().unwrap_or_default();
    let (image, lines) = if (h, w) == (input_size, input_size) {
        (image.clone(), lines)
    } else {
        let t = GeomTransform::CropResize {
            window: [0.0, 0.0, w as f64, h as f64],
            dst: (input_size as f64, input_size as f64),
        };
        apply_transform(&t, image, &lines, MIN_CLIPPED_LEN)?
    };
    Ok(LoadedSample {
        id: sample.image_id.clone(),
        image: quantize(&image),
        lines: sample.lines.as_ref().map(|_| lines),
    })
}

/// Reads every image of a manifest from disk, resizing to the model input.
/// Relative image paths resolve against the manifest location.
pub fn load_dataset(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    input_size: usize,
) -> Result<LoadedDataset> {
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let image = load_image_png(&resolve_path(manifest_path, &s.image_path))?;
        samples.push(prepare_sample(s, &image, input_size)?);
    }
    Ok(LoadedDataset { name: manifest.name.clone(), role: manifest.role, samples })
}

/// In-memory variant of [`load_dataset`] for generated data; `images[i]`
/// belongs to `manifest.samples[i]`.
pub fn load_dataset_from_images(
    manifest: &DatasetManifest,
    images: &[Array3<f64>],
    input_size: usize,
) -> Result<LoadedDataset> {
    if images.len() != manifest.samples.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images for {} manifest samples",
            images.len(),
            manifest.samples.len()
        )));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (s, image) in manifest.samples.iter().zip(images) {
        samples.push(prepare_sample(s, image, input_size)?);
    }
    Ok(LoadedDataset { name: manifest.name.clone(), role: manifest.role, samples })
}

/// Anything that maps a sample to 16-channel pre-activations.
pub trait Predictor {
    fn predict(&self, sample: &LoadedSample) -> Result<FeatureMaps>;
}

impl Predictor for LineNet {
    fn predict(&self, sample: &LoadedSample) -> Result<FeatureMaps> {
        let x = image_to_f64(&sample.image);
        let (y, _) = self.forward(&x)?;
        FeatureMaps::new(y)
    }
}

/// Losses of one optimizer step. `consistency` is present only for semi
/// steps that ran the unlabeled phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub labeled: LabeledLossBreakdown,
    pub consistency: Option<ConsistencyLossBreakdown>,
}

/// Per-epoch log line: every loss part by name plus validation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: String,
    pub losses: BTreeMap<String, f64>,
    pub val_sap10: f64,
    pub val_fh: f64,
    /// Mean fraction of map positions passing the confidence gate; 0 in the
    /// supervised stage.
    pub mask_fraction: f64,
}

/// Serialized rng position, enough to reconstruct the exact generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub stream: u64,
    /// u128 word position in decimal.
    pub word_pos: String,
}

fn snapshot(rng: &ChaCha8Rng) -> RngSnapshot {
    RngSnapshot { stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
}

/// Self-describing training artifact: best parameters, both config
/// snapshots, the full epoch history, and final rng positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub stage: String,
    /// 1-based epoch whose parameters are stored.
    pub epoch: usize,
    pub val_sap10: f64,
    pub val_fh: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: BTreeMap<String, Vec<f64>>,
    pub rng: Vec<RngSnapshot>,
    pub history: Vec<EpochRecord>,
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

impl Checkpoint {
    /// Reconstructs the network these parameters belong to.
    pub fn build_net(&self) -> Result<LineNet> {
        let mut net = build_model(&self.model, self.train.seed)?;
        net.load_blobs(&self.params)?;
        Ok(net)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let text = serde_json::to_string(checkpoint).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

enum Mode {
    Supervised,
    Semi,
}

/// Cyclic shuffled sampler. Reshuffles from its own rng exactly when a pass
/// is exhausted, so index draws are a pure function of the stream.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Batcher { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.pos >= self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Step-level training driver. Owns the model, optimizer state, and the rng
/// streams; both stage loops and the step-exactness tests drive it.
pub struct Trainer {
    net: LineNet,
    opt: Adam,
    cfg: TrainConfig,
    mode: Mode,
    labeled: LoadedDataset,
    unlabeled: Option<LoadedDataset>,
    lab_batcher: Batcher,
    unlab_batcher: Batcher,
    rng_labeled: ChaCha8Rng,
    rng_unlabeled: ChaCha8Rng,
    pool: Option<rayon::ThreadPool>,
}

fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_labeled(ds: &LoadedDataset, what: &str) -> Result<()> {
    if ds.samples.is_empty() {
        return Err(Error::Data(format!("{what} set is empty")));
    }
    if !ds.is_fully_labeled() {
        return Err(Error::Data(format!("{what} set contains unlabeled samples")));
    }
    Ok(())
}

impl Trainer {
    pub fn new_supervised(net: LineNet, labeled: &LoadedDataset, cfg: &TrainConfig) -> Result<Self> {
        Self::new(net, labeled, None, cfg, Mode::Supervised)
    }

    pub fn new_semi(
        net: LineNet,
        labeled: &LoadedDataset,
        unlabeled: &LoadedDataset,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if unlabeled.samples.is_empty() {
            return Err(Error::InvalidArgument(
                "unlabeled set is empty; train supervised instead (train_supervised)".into(),
            ));
        }
        Self::new(net, labeled, Some(unlabeled), cfg, Mode::Semi)
    }

    fn new(
        net: LineNet,
        labeled: &LoadedDataset,
        unlabeled: Option<&LoadedDataset>,
        cfg: &TrainConfig,
        mode: Mode,
    ) -> Result<Self> {
        cfg.validate()?;
        check_labeled(labeled, "labeled")?;
        let s = net.config.input_size;
        for sample in labeled.samples.iter().chain(unlabeled.iter().flat_map(|d| &d.samples)) {
            if sample.image.dim() != (3, s, s) {
                return Err(Error::ShapeMismatch {
                    expected: format!("3 x {s} x {s} images"),
                    got: format!("{:?} for sample {:?}", sample.image.dim(), sample.id),
                });
            }
        }
        let lr = match mode {
            Mode::Supervised => cfg.lr_supervised,
            Mode::Semi => cfg.lr_semi,
        };
        let pool = if cfg.threads == 0 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        };
        Ok(Trainer {
            opt: Adam::new(&net, lr),
            net,
            cfg: cfg.clone(),
            mode,
            labeled: labeled.clone(),
            unlabeled: unlabeled.cloned(),
            lab_batcher: Batcher::new(labeled.samples.len()),
            unlab_batcher: Batcher::new(unlabeled.map_or(0, |d| d.samples.len())),
            rng_labeled: seeded_stream(cfg.seed, STREAM_LABELED),
            rng_unlabeled: seeded_stream(cfg.seed, STREAM_UNLABELED),
            pool,
        })
    }

    pub fn net(&self) -> &LineNet {
        &self.net
    }

    pub fn into_net(self) -> LineNet {
        self.net
    }

    /// Applies the configured step decay: epochs past `lr_decay_epoch` run
    /// at the stage rate times `lr_decay_factor`.
    pub fn set_lr_for_epoch(&mut self, epoch: usize) {
        let base = match self.mode {
            Mode::Supervised => self.cfg.lr_supervised,
            Mode::Semi => self.cfg.lr_semi,
        };
        let e = self.cfg.lr_decay_epoch;
        self.opt.lr =
            if e > 0 && epoch > e { base * self.cfg.lr_decay_factor } else { base };
    }

    /// Labeled batches per epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.labeled.samples.len().div_ceil(self.cfg.batch_labeled)
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// Draws a labeled batch, augments it, and returns the mean loss parts
    /// and mean parameter gradient. The rng call sequence here is identical
    /// across stages.
    fn labeled_grads(&mut self) -> Result<(LabeledLossBreakdown, NetGrads)> {
        let idxs = self.lab_batcher.next(self.cfg.batch_labeled, &mut self.rng_labeled);
        let mut work = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let sample = &self.labeled.samples[i];
            let image = image_to_f64(&sample.image);
            let lines = sample.lines.as_ref().expect("checked at construction");
            let (img_aug, lines_aug) = crate::augment::labeled_augment(
                &image,
                lines,
                &self.cfg.augment.labeled,
                &mut self.rng_labeled,
            )?;
            let (_, h, w) = img_aug.dim();
            let (mh, mw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
            let lines_map = scale_lines(&lines_aug, 1.0 / DOWNSAMPLE as f64);
            let gt = encode_ground_truth(&lines_map, mh, mw, &self.cfg.encode)?;
            work.push((img_aug, gt, lines_map));
        }
        let net = &self.net;
        let loss_params = &self.cfg.loss;
        let results: Result<Vec<(LabeledLossBreakdown, NetGrads)>> = self.install(|| {
            work.par_iter()
                .map(|(img, gt, lines_map)| {
                    let (y, cache) = net.forward(img)?;
                    let pred = FeatureMaps::new(y)?;
                    let (breakdown, gmap) =
                        labeled_loss_with_grad(&pred, gt, lines_map, loss_params)?;
                    Ok((breakdown, net.backward(&cache, &gmap)))
                })
                .collect()
        });
        let results = results?;
        let n = results.len() as f64;
        let mut grads = NetGrads::zeros_like(&self.net);
        let mut parts = Vec::with_capacity(results.len());
        for (breakdown, g) in &results {
            parts.push(*breakdown);
            grads.add(g);
        }
        grads.scale(1.0 / n);
        Ok((mean_labeled(&parts), grads))
    }

    /// One supervised step: labeled gradient, optimizer update.
    pub fn step_supervised(&mut self) -> Result<StepRecord> {
        let (labeled, grads) = self.labeled_grads()?;
        self.opt.step(&mut self.net, &grads);
        Ok(StepRecord { labeled, consistency: None })
    }

    /// One semi-supervised step: labeled gradient plus the weighted
    /// consistency gradient over an unlabeled batch. The consistency term is
    /// added only when some gate opened, so a closed gate (or zero weight)
    /// leaves the update bitwise equal to the supervised one.
    pub fn step_semi(&mut self) -> Result<StepRecord> {
        if !matches!(self.mode, Mode::Semi) {
            return Err(Error::InvalidArgument(
                "trainer was built without an unlabeled set".into(),
            ));
        }
        let (labeled, mut grads) = self.labeled_grads()?;
        let mut consistency = None;
        if self.cfg.lambda_unlabeled > 0.0 {
            let (mean_cons, unlab_grads) = self.consistency_grads()?;
            if let Some(g) = unlab_grads {
                grads.add(&g);
            }
            consistency = Some(mean_cons);
        }
        self.opt.step(&mut self.net, &grads);
        Ok(StepRecord { labeled, consistency })
    }

    /// Unlabeled phase: triples, optional cutmix, three forward passes per
    /// sample, consistency loss, backward through both strong views.
    /// Returns None gradients when no gate opened anywhere in the batch.
    fn consistency_grads(&mut self) -> Result<(ConsistencyLossBreakdown, Option<NetGrads>)> {
        let unlabeled = self.unlabeled.as_ref().expect("semi mode");
        let idxs = self.unlab_batcher.next(self.cfg.batch_unlabeled, &mut self.rng_unlabeled);
        let mut triples = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let image = image_to_f64(&unlabeled.samples[i].image);
            triples.push(make_unlabeled_triple(
                &image,
                &self.cfg.augment.weak,
                &self.cfg.augment.strong,
                &mut self.rng_unlabeled,
            )?);
        }
        let (mixed, masks): (Vec<(Array3<f64>, Array3<f64>)>, Vec<MixMask>) = match self.cfg.cutmix
        {
            CutMixMode::Off => (
                triples.iter().map(|t| (t.strong1.clone(), t.strong2.clone())).collect(),
                Vec::new(),
            ),
            CutMixMode::Axis => cutmix_axis(&triples, DOWNSAMPLE, &mut self.rng_unlabeled)?,
            CutMixMode::Square => cutmix_square(&triples, DOWNSAMPLE, &mut self.rng_unlabeled)?,
        };

        let net = &self.net;
        let dual = self.cfg.dual_strong;
        type Forwarded =
            (FeatureMaps, (FeatureMaps, crate::nn::ForwardCache), Option<(FeatureMaps, crate::nn::ForwardCache)>);
        let forwarded: Result<Vec<Forwarded>> = self.install(|| {
            triples
                .par_iter()
                .zip(mixed.par_iter())
                .map(|(t, (s1, s2))| {
                    let (wy, _) = net.forward(&t.weak)?;
                    let p_w = FeatureMaps::new(wy)?;
                    let (y1, c1) = net.forward(s1)?;
                    let f1 = (FeatureMaps::new(y1)?, c1);
                    let f2 = if dual {
                        let (y2, c2) = net.forward(s2)?;
                        Some((FeatureMaps::new(y2)?, c2))
                    } else {
                        None
                    };
                    Ok((p_w, f1, f2))
                })
                .collect()
        });
        let forwarded = forwarded?;

        let n = forwarded.len();
        let mut parts = Vec::with_capacity(n);
        let mut grad_maps = Vec::with_capacity(n);
        for (i, (p_w, (p_s1, _), f2)) in forwarded.iter().enumerate() {
            let mix = masks.get(i).map(|m| (&forwarded[(i + 1) % n].0, m));
            let (breakdown, g1, g2) = consistency_loss_with_grad(
                p_w,
                p_s1,
                f2.as_ref().map(|(p, _)| p),
                self.cfg.tau,
                mix,
            )?;
            parts.push(breakdown);
            grad_maps.push((g1, g2));
        }
        let mean_cons = mean_consistency(&parts);
        if parts.iter().all(|p| p.mask_fraction == 0.0) {
            return Ok((mean_cons, None));
        }

        let per_sample: Vec<NetGrads> = self.install(|| {
            forwarded
                .par_iter()
                .zip(grad_maps.par_iter())
                .map(|((_, (_, c1), f2), (g1, g2))| {
                    let mut g = net.backward(c1, g1);
                    if let (Some((_, c2)), Some(g2)) = (f2, g2) {
                        g.add(&net.backward(c2, g2));
                    }
                    g
                })
                .collect()
        });
        let mut total = NetGrads::zeros_like(&self.net);
        for g in &per_sample {
            total.add(g);
        }
        total.scale(self.cfg.lambda_unlabeled / n as f64);
        Ok((mean_cons, Some(total)))
    }

    /// Validation metrics for the current parameters.
    pub fn validate_on(&self, val: &LoadedDataset) -> Result<EvalReport> {
        self.install(|| evaluate(&self.net, val, &self.cfg.decode, &self.cfg.eval))
    }

    fn rng_snapshots(&self) -> Vec<RngSnapshot> {
        vec![snapshot(&self.rng_labeled), snapshot(&self.rng_unlabeled)]
    }
}

fn scale_lines(lines: &[LineSegment], s: f64) -> Vec<LineSegment> {
    lines
        .iter()
        .map(|l| {
            let mut out = *l;
            out.start.x *= s;
            out.start.y *= s;
            out.end.x *= s;
            out.end.y *= s;
            out
        })
        .collect()
}

fn zero_labeled() -> LabeledLossBreakdown {
    LabeledLossBreakdown {
        center: 0.0,
        disp: 0.0,
        tp_match: 0.0,
        sol_center: 0.0,
        sol_disp: 0.0,
        sol_match: 0.0,
        seg_line: 0.0,
        seg_junction: 0.0,
        reg_length: 0.0,
        reg_degree: 0.0,
        total: 0.0,
    }
}

fn mean_labeled(parts: &[LabeledLossBreakdown]) -> LabeledLossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut acc = zero_labeled();
    for p in parts {
        acc.center += p.center;
        acc.disp += p.disp;
        acc.tp_match += p.tp_match;
        acc.sol_center += p.sol_center;
        acc.sol_disp += p.sol_disp;
        acc.sol_match += p.sol_match;
        acc.seg_line += p.seg_line;
        acc.seg_junction += p.seg_junction;
        acc.reg_length += p.reg_length;
        acc.reg_degree += p.reg_degree;
        acc.total += p.total;
    }
    for v in [
        &mut acc.center,
        &mut acc.disp,
        &mut acc.tp_match,
        &mut acc.sol_center,
        &mut acc.sol_disp,
        &mut acc.sol_match,
        &mut acc.seg_line,
        &mut acc.seg_junction,
        &mut acc.reg_length,
        &mut acc.reg_degree,
        &mut acc.total,
    ] {
        *v /= n;
    }
    acc
}

fn mean_consistency(parts: &[ConsistencyLossBreakdown]) -> ConsistencyLossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut acc =
        ConsistencyLossBreakdown { classification: 0.0, regression: 0.0, mask_fraction: 0.0, total: 0.0 };
    for p in parts {
        acc.classification += p.classification;
        acc.regression += p.regression;
        acc.mask_fraction += p.mask_fraction;
        acc.total += p.total;
    }
    acc.classification /= n;
    acc.regression /= n;
    acc.mask_fraction /= n;
    acc.total /= n;
    acc
}

fn epoch_losses(
    labeled: &LabeledLossBreakdown,
    consistency: Option<&ConsistencyLossBreakdown>,
) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    out.insert("center".into(), labeled.center);
    out.insert("disp".into(), labeled.disp);
    out.insert("match".into(), labeled.tp_match);
    out.insert("sol_center".into(), labeled.sol_center);
    out.insert("sol_disp".into(), labeled.sol_disp);
    out.insert("sol_match".into(), labeled.sol_match);
    out.insert("seg_line".into(), labeled.seg_line);
    out.insert("seg_junction".into(), labeled.seg_junction);
    out.insert("reg_length".into(), labeled.reg_length);
    out.insert("reg_degree".into(), labeled.reg_degree);
    out.insert("total".into(), labeled.total);
    if let Some(c) = consistency {
        out.insert("consistency_classification".into(), c.classification);
        out.insert("consistency_regression".into(), c.regression);
        out.insert("consistency_total".into(), c.total);
    }
    out
}

/// Shared stage loop: run epochs, validate after each, keep the strictly
/// best parameters by validation sAP at the primary threshold.
fn run_stage(
    mut trainer: Trainer,
    val: &LoadedDataset,
    epochs: usize,
    stage: &str,
    model: &ModelConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    check_labeled(val, "validation")?;
    if epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let semi = matches!(trainer.mode, Mode::Semi);
    let steps = trainer.steps_per_epoch();
    let primary = crate::metrics::threshold_key(trainer.cfg.eval.primary_sap);
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, f64, usize, BTreeMap<String, Vec<f64>>)> = None;
    for epoch in 1..=epochs {
        trainer.set_lr_for_epoch(epoch);
        let mut lab_parts = Vec::with_capacity(steps);
        let mut cons_parts = Vec::new();
        for _ in 0..steps {
            let rec =
                if semi { trainer.step_semi()? } else { trainer.step_supervised()? };
            lab_parts.push(rec.labeled);
            if let Some(c) = rec.consistency {
                cons_parts.push(c);
            }
        }
        let report = trainer.validate_on(val)?;
        let sap = report.sap.get(&primary).copied().unwrap_or(0.0);
        let mean_lab = mean_labeled(&lab_parts);
        let mean_cons =
            if cons_parts.is_empty() { None } else { Some(mean_consistency(&cons_parts)) };
        let record = EpochRecord {
            epoch,
            stage: stage.to_string(),
            losses: epoch_losses(&mean_lab, mean_cons.as_ref()),
            val_sap10: sap,
            val_fh: report.f_h,
            mask_fraction: mean_cons.map_or(0.0, |c| c.mask_fraction),
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(b, ..)| sap > *b) {
            best = Some((sap, report.f_h, epoch, trainer.net.param_blobs()));
        }
    }
    let (val_sap10, val_fh, epoch, params) = best.expect("epochs >= 1");
    Ok(Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        stage: stage.to_string(),
        epoch,
        val_sap10,
        val_fh,
        model: model.clone(),
        train: trainer.cfg.clone(),
        params,
        rng: trainer.rng_snapshots(),
        history,
    })
}

/// Supervised warm-up from a fresh seed-initialized model. Returns the
/// checkpoint of the best validation epoch; `on_epoch` sees every epoch
/// record as it is produced.
pub fn train_supervised(
    labeled: &LoadedDataset,
    val: &LoadedDataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    let net = build_model(model, cfg.seed)?;
    let trainer = Trainer::new_supervised(net, labeled, cfg)?;
    run_stage(trainer, val, cfg.epochs_supervised, "supervised", model, on_epoch)
}

/// Semi-supervised stage warm-started from a supervised checkpoint.
pub fn train_semi(
    warm: &Checkpoint,
    labeled: &LoadedDataset,
    unlabeled: &LoadedDataset,
    val: &LoadedDataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    let net = warm.build_net()?;
    let model = warm.model.clone();
    let trainer = Trainer::new_semi(net, labeled, unlabeled, cfg)?;
    run_stage(trainer, val, cfg.epochs_semi, "semi", &model, on_epoch)
}

/// Runs the predictor over a labeled dataset and scores the decoded
/// segments. Deterministic; parallel over images with an ordered reduction.
pub fn evaluate<P: Predictor + Sync>(
    predictor: &P,
    data: &LoadedDataset,
    decode: &DecodeParams,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    check_labeled(data, "evaluation")?;
    let results: Result<Vec<(Vec<LineSegment>, Vec<LineSegment>)>> = data
        .samples
        .par_iter()
        .map(|s| {
            let maps = predictor.predict(s)?;
            let (mh, mw) = (maps.height(), maps.width());
            let decoded = decode_lines(&maps, decode);
            let preds = scale_to_eval(&decoded, mw as f64, mh as f64, eval.eval_size);
            let (_, h, w) = s.image.dim();
            let gt = scale_to_eval(
                s.lines.as_ref().expect("checked labeled"),
                w as f64,
                h as f64,
                eval.eval_size,
            );
            Ok((preds, gt))
        })
        .collect();
    let (preds, gts): (Vec<_>, Vec<_>) = results?.into_iter().unzip();
    compute_report(&preds, &gts, eval)
}
