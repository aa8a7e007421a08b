//! Two-stage training: contrastive pretraining on aligned pairs, then
//! fine-tuning with identity + batch-hard triplet losses. Owns seeding,
//! the learning-rate schedule, reports, and resumable optimizer state.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::dataio::augment::{augment, AugmentConfig};
use crate::dataio::batches::{pair_batches, paired_pretrain_indices, pk_batches};
use crate::dataio::manifest::{DatasetStats, Role, SplitManifest};
use crate::dataio::preprocess::{preprocess, PreprocessConfig};
use crate::error::{Error, Result};
use crate::eval::{embed_set, evaluate_set, EvalConfig, EvalMode};
use crate::graph::Graph;
use crate::losses::{batch_hard_triplet_loss, id_loss, symmetric_contrastive_loss};
use crate::model::checkpoint::crc64;
use crate::model::{save_checkpoint, ForwardInput, ModelConfig, ParamNodes, Params};
use crate::optim::Sgd;
use crate::stream::named_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    WarmupCosine,
    Constant,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::WarmupCosine => "cosine",
            Schedule::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(Schedule::WarmupCosine),
            "constant" => Some(Schedule::Constant),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Pair count per batch (pretrain stage).
    pub batch_size: usize,
    /// Identities and instances per batch (fine-tune stage).
    pub p: usize,
    pub k: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Triplet margin (fine-tune stage).
    pub margin: f64,
    /// Validate (mode All) every this many epochs; 0 disables and the
    /// final parameters are kept as-is.
    pub eval_every: usize,
    /// Write checkpoint + optimizer state every this many epochs when an
    /// output directory is given; 0 = only at the end.
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
    /// Halt after this many epochs while keeping the full schedule
    /// horizon, emulating an interrupted run. Not part of the config
    /// hash: the interrupted and complete run are the same experiment.
    pub stop_after: Option<usize>,
}

impl StageConfig {
    /// Published pretraining recipe: 512 pairs per batch, 60 epochs,
    /// lr 3e-3. Desk runs override these through config files.
    pub fn pretrain_reference(seed: u64) -> Self {
        StageConfig {
            stage: Stage::Pretrain,
            epochs: 60,
            batch_size: 512,
            p: 0,
            k: 0,
            lr: 3e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_frac: 0.05,
            schedule: Schedule::WarmupCosine,
            seed,
            margin: 0.3,
            eval_every: 0,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
            stop_after: None,
        }
    }

    /// Published fine-tuning recipe: batches of 32 (8 identities x 4),
    /// 200 epochs, lr 5e-4.
    pub fn finetune_reference(seed: u64) -> Self {
        StageConfig {
            stage: Stage::Finetune,
            epochs: 200,
            batch_size: 32,
            p: 8,
            k: 4,
            lr: 5e-4,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_frac: 0.05,
            schedule: Schedule::WarmupCosine,
            seed,
            margin: 0.3,
            eval_every: 10,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
            stop_after: None,
        }
    }

    pub fn to_kv_block(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("p", self.p.to_string());
        kv("k", self.k.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("warmup_frac", self.warmup_frac.to_string());
        kv("schedule", self.schedule.as_str().to_string());
        kv("margin", self.margin.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("flip_prob", self.augment.flip_prob.to_string());
        kv("crop_pad", self.augment.crop_pad.to_string());
        kv("erase_prob", self.augment.erase_prob.to_string());
        kv("erase_area_min", self.augment.erase_area.0.to_string());
        kv("erase_area_max", self.augment.erase_area.1.to_string());
        s
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let err = |what: &str| {
            Error::Config(format!(
                "{} key {key}: bad {what} '{value}'",
                self.stage.as_str()
            ))
        };
        macro_rules! num {
            ($t:ty, $what:literal) => {
                value.parse::<$t>().map_err(|_| err($what))?
            };
        }
        match key {
            "epochs" => self.epochs = num!(usize, "integer"),
            "batch_size" => self.batch_size = num!(usize, "integer"),
            "p" => self.p = num!(usize, "integer"),
            "k" => self.k = num!(usize, "integer"),
            "lr" => self.lr = num!(f64, "float"),
            "momentum" => self.momentum = num!(f64, "float"),
            "weight_decay" => self.weight_decay = num!(f64, "float"),
            "warmup_frac" => self.warmup_frac = num!(f64, "float"),
            "schedule" => {
                self.schedule = Schedule::parse(value)
                    .ok_or_else(|| err("schedule (cosine|constant)"))?
            }
            "margin" => self.margin = num!(f64, "float"),
            "eval_every" => self.eval_every = num!(usize, "integer"),
            "checkpoint_every" => self.checkpoint_every = num!(usize, "integer"),
            "flip_prob" => self.augment.flip_prob = num!(f64, "float"),
            "crop_pad" => self.augment.crop_pad = num!(usize, "integer"),
            "erase_prob" => self.augment.erase_prob = num!(f64, "float"),
            "erase_area_min" => self.augment.erase_area.0 = num!(f64, "float"),
            "erase_area_max" => self.augment.erase_area.1 = num!(f64, "float"),
            _ => {
                return Err(Error::Config(format!(
                    "unknown {} key '{key}'",
                    self.stage.as_str()
                )))
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total_steps`: linear warmup over the
/// first `warmup_frac` of steps (exclusive start, so step 0 gives 0),
/// then cosine decay to 1% of the base rate.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &StageConfig) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::WarmupCosine => {
            let total = total_steps.max(1);
            let warmup = (cfg.warmup_frac * total as f64).ceil() as usize;
            if warmup > 0 && step < warmup {
                return cfg.lr * step as f64 / warmup as f64;
            }
            let span = (total - warmup).max(1);
            let t = ((step - warmup) as f64 / span as f64).min(1.0);
            let floor = 0.01 * cfg.lr;
            floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Deterministic training record. Wall-clock time lives in a separate
/// timing file so reports stay byte-identical across runs with one seed.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: u64,
    pub rows: Vec<ReportRow>,
    pub final_map: Option<f64>,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut text = format!(
            "# stage={} seed={} config_hash={:016x}\n",
            self.stage.as_str(),
            self.seed,
            self.config_hash
        );
        for row in &self.rows {
            writeln!(
                text,
                "{}\t{}\t{}\t{}",
                row.epoch,
                self.stage.as_str(),
                row.loss,
                row.lr
            )
            .expect("string write");
        }
        if let Some(map) = self.final_map {
            writeln!(text, "# final_map={map}").expect("string write");
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn save_timing(&self, path: &Path) -> Result<()> {
        let text = format!(
            "stage={}\nwall_seconds={:.3}\n",
            self.stage.as_str(),
            self.wall_seconds
        );
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn config_hash(model_kv: &str, stage_kv: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in model_kv.bytes().chain(stage_kv.bytes()) {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Resumable training state: the epoch to run next, optimizer velocity
/// buffers, report rows so far, and the best validation snapshot. A
/// resumed run therefore reproduces the uninterrupted run's checkpoint
/// and report byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub next_epoch: usize,
    pub velocities: Vec<Vec<f64>>,
    pub rows: Vec<ReportRow>,
    /// (mAP, flattened params in visit order) of the best validation.
    pub best: Option<(f64, Vec<f64>)>,
}

pub fn flatten_params(params: &Params) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.num_params());
    params.for_each_tensor(&mut |t| out.extend_from_slice(t.data()));
    out
}

pub fn unflatten_params(params: &mut Params, flat: &[f64]) -> Result<()> {
    if flat.len() != params.num_params() {
        return Err(Error::Invalid(format!(
            "flattened blob holds {} values, params need {}",
            flat.len(),
            params.num_params()
        )));
    }
    let mut offset = 0;
    params.for_each_tensor_mut(&mut |t| {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    });
    Ok(())
}

const STATE_MAGIC: &[u8; 4] = b"TSST";
const STATE_VERSION: u32 = 1;

pub fn save_train_state(path: &Path, state: &TrainState) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(STATE_MAGIC);
    bytes.extend_from_slice(&STATE_VERSION.to_le_bytes());
    bytes.push(match state.stage {
        Stage::Pretrain => 0,
        Stage::Finetune => 1,
    });
    bytes.extend_from_slice(&(state.next_epoch as u32).to_le_bytes());
    bytes.extend_from_slice(&(state.velocities.len() as u32).to_le_bytes());
    for v in &state.velocities {
        bytes.extend_from_slice(&(v.len() as u32).to_le_bytes());
        for &x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    bytes.extend_from_slice(&(state.rows.len() as u32).to_le_bytes());
    for row in &state.rows {
        bytes.extend_from_slice(&(row.epoch as u32).to_le_bytes());
        bytes.extend_from_slice(&row.loss.to_le_bytes());
        bytes.extend_from_slice(&row.lr.to_le_bytes());
    }
    match &state.best {
        None => bytes.push(0),
        Some((map, blob)) => {
            bytes.push(1);
            bytes.extend_from_slice(&map.to_le_bytes());
            bytes.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            for &x in blob {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let crc = crc64(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::CheckpointFormat(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 {
        return Err(bad("file too short"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(crc_bytes.try_into().expect("8 bytes"));
    if crc64(body) != stored {
        return Err(bad("checksum mismatch"));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(bad("truncated"));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != STATE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes"));
    if version != STATE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let stage = match take(&mut pos, 1)?[0] {
        0 => Stage::Pretrain,
        1 => Stage::Finetune,
        other => return Err(bad(&format!("unknown stage tag {other}"))),
    };
    let next_epoch = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let n_slots = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let read_f64s = |pos: &mut usize, n: usize| -> Result<Vec<f64>> {
        let raw = take(pos, n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let mut velocities = Vec::with_capacity(n_slots);
    for _ in 0..n_slots {
        let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        velocities.push(read_f64s(&mut pos, len)?);
    }
    let n_rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let mut rows = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let epoch =
            u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let loss = f64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes"));
        let lr = f64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes"));
        rows.push(ReportRow { epoch, loss, lr });
    }
    let best = match take(&mut pos, 1)?[0] {
        0 => None,
        1 => {
            let map = f64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes"));
            let len =
                u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
            Some((map, read_f64s(&mut pos, len)?))
        }
        other => return Err(bad(&format!("unknown best tag {other}"))),
    };
    if pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(TrainState {
        stage,
        next_epoch,
        velocities,
        rows,
        best,
    })
}

fn sgd_step_all(params: &mut Params, sgd: &mut Sgd, lr: f64) -> Result<()> {
    let mut idx = 0usize;
    let mut first_err = None;
    params.for_each_tensor_mut(&mut |t| {
        if first_err.is_none() {
            if let Err(e) = sgd.step_tensor(idx, t, lr) {
                first_err = Some(e);
            }
        }
        idx += 1;
    });
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Loads, preprocesses, and augments one item for training.
fn training_tensor(
    manifest: &SplitManifest,
    stats: &DatasetStats,
    item_idx: usize,
    pp: &PreprocessConfig,
    aug: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f64>, [f64; 3])> {
    let item = manifest.load_item(&manifest.items[item_idx])?;
    let (tensor, size) = preprocess(&item, pp, Some(stats))?;
    Ok((augment(&tensor, aug, rng), size.as_array()))
}

/// Overwrite a fresh classifier with imprinted weights: each column is
/// the unit-normalized mean training feature of its class. A cold head
/// leaves the identity loss pinned at ln(C) for hundreds of steps while
/// batch-hard mining shrinks the embedding; imprinting makes the
/// identity gradient informative from the first step.
fn imprint_classifier(
    manifest: &SplitManifest,
    stats: &DatasetStats,
    params: &mut Params,
    cfg: &ModelConfig,
    pp: &PreprocessConfig,
) -> Result<()> {
    let identities = manifest.train_identities();
    let d = cfg.embed_dim;
    let mut sums = vec![vec![0.0f64; d]; identities.len()];
    let mut counts = vec![0usize; identities.len()];
    for (item_idx, it) in manifest.with_role(Role::Train) {
        let item = manifest.load_item(&manifest.items[item_idx])?;
        let (tensor, size) = preprocess(&item, pp, Some(stats))?;
        let input = ForwardInput {
            image: &tensor,
            modality: it.modality,
            size: cfg.use_size_embed.then_some(size.as_array()),
        };
        let feat = crate::model::extract_feature(params, input, cfg)?;
        let class = identities
            .binary_search(&it.object_id)
            .expect("train identity present in index");
        for (acc, v) in sums[class].iter_mut().zip(&feat) {
            *acc += v;
        }
        counts[class] += 1;
    }
    let head = params.classifier.as_mut().expect("classifier attached");
    let w = head.w.data_mut();
    for (c, (sum, &n)) in sums.iter().zip(&counts).enumerate() {
        if n == 0 {
            continue;
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        // column-major position: w has shape [d, num_classes]
        for (row, v) in mean.iter().enumerate() {
            w[row * counts.len() + c] = v / norm;
        }
    }
    Ok(())
}

fn periodic_save(
    out_dir: Option<&Path>,
    stage: Stage,
    cfg: &ModelConfig,
    params: &Params,
    state: &TrainState,
    report: &RunReport,
) -> Result<()> {
    let Some(dir) = out_dir else {
        return Ok(());
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(params, cfg, &dir.join(format!("{}.toss", stage.as_str())))?;
    save_train_state(&dir.join(format!("{}.tsst", stage.as_str())), state)?;
    report.save_tsv(&dir.join(format!("report_{}.tsv", stage.as_str())))
}

fn make_report(
    stage: Stage,
    seed: u64,
    config_hash: u64,
    rows: &[ReportRow],
    final_map: Option<f64>,
    wall_seconds: f64,
) -> RunReport {
    RunReport {
        stage,
        seed,
        config_hash,
        rows: rows.to_vec(),
        final_map,
        wall_seconds,
    }
}

/// Stage 1: symmetric contrastive pretraining over aligned pairs. The
/// size token is disabled regardless of the model config, so size
/// projection parameters receive exactly zero gradient.
pub fn pretrain(
    params: &mut Params,
    manifest: &SplitManifest,
    stats: &DatasetStats,
    cfg: &ModelConfig,
    stage: &StageConfig,
    resume: Option<TrainState>,
    out_dir: Option<&Path>,
) -> Result<(RunReport, TrainState)> {
    let started = Instant::now();
    let mut cfg_pre = cfg.clone();
    cfg_pre.use_size_embed = false;
    let pairs = paired_pretrain_indices(manifest);
    if pairs.is_empty() {
        return Err(Error::Invalid(
            "no aligned optical/SAR pairs in the training split".into(),
        ));
    }
    let batches_per_epoch = pairs.len() / stage.batch_size;
    let total_steps = stage.epochs * batches_per_epoch;
    let pp = PreprocessConfig::for_model(cfg.input_h, cfg.input_w);
    let mut sgd = Sgd::new(stage.momentum);
    sgd.weight_decay = stage.weight_decay;
    let mut start_epoch = 0usize;
    let mut rows = Vec::new();
    if let Some(state) = resume {
        if state.stage != Stage::Pretrain {
            return Err(Error::Invalid("resume state is not a pretrain state".into()));
        }
        start_epoch = state.next_epoch;
        sgd.set_velocities(state.velocities);
        rows = state.rows;
    }
    let hash = config_hash(&cfg.to_kv_block(), &stage.to_kv_block());
    let end_epoch = stage.stop_after.map_or(stage.epochs, |s| s.min(stage.epochs));
    for epoch in start_epoch..end_epoch {
        let batches = pair_batches(&pairs, stage.batch_size, stage.seed, epoch)?;
        let mut epoch_loss = 0.0f64;
        let mut epoch_lr = None;
        for (bi, batch) in batches.iter().enumerate() {
            let step = epoch * batches_per_epoch + bi;
            let lr = lr_schedule(step, total_steps, stage);
            epoch_lr.get_or_insert(lr);
            let mut aug_rng = named_rng(
                stage.seed,
                &format!("augment/pretrain/epoch{epoch}/batch{bi}"),
            );
            let mut opt_tensors = Vec::with_capacity(batch.len());
            let mut sar_tensors = Vec::with_capacity(batch.len());
            for &(oi, si) in batch {
                opt_tensors.push(training_tensor(manifest, stats, oi, &pp, &stage.augment, &mut aug_rng)?.0);
                sar_tensors.push(training_tensor(manifest, stats, si, &pp, &stage.augment, &mut aug_rng)?.0);
            }
            let mut g = Graph::new();
            let pn = ParamNodes::bind(&mut g, params);
            let mut dropout_rng = (cfg_pre.dropout_rate > 0.0).then(|| {
                named_rng(
                    stage.seed,
                    &format!("dropout/pretrain/epoch{epoch}/batch{bi}"),
                )
            });
            let opt_inputs: Vec<ForwardInput> = batch
                .iter()
                .enumerate()
                .map(|(i, &(oi, _))| ForwardInput {
                    image: &opt_tensors[i],
                    modality: manifest.items[oi].modality,
                    size: None,
                })
                .collect();
            let o_feats =
                crate::model::batch_feature_node(&mut g, &pn, &opt_inputs, &cfg_pre, dropout_rng.as_mut())?;
            let sar_inputs: Vec<ForwardInput> = batch
                .iter()
                .enumerate()
                .map(|(i, &(_, si))| ForwardInput {
                    image: &sar_tensors[i],
                    modality: manifest.items[si].modality,
                    size: None,
                })
                .collect();
            let s_feats =
                crate::model::batch_feature_node(&mut g, &pn, &sar_inputs, &cfg_pre, dropout_rng.as_mut())?;
            let loss = symmetric_contrastive_loss(&mut g, o_feats, s_feats, pn.log_tau)?;
            let loss_value = g.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    items: batch.iter().flat_map(|&(o, s)| [o, s]).collect(),
                });
            }
            g.backward(loss)?;
            pn.write_grads(&g, params);
            sgd_step_all(params, &mut sgd, lr)?;
            epoch_loss += loss_value;
        }
        rows.push(ReportRow {
            epoch,
            loss: epoch_loss / batches_per_epoch as f64,
            lr: epoch_lr.unwrap_or(0.0),
        });
        let last = epoch + 1 == stage.epochs;
        if last || (stage.checkpoint_every > 0 && (epoch + 1) % stage.checkpoint_every == 0) {
            let state = TrainState {
                stage: Stage::Pretrain,
                next_epoch: epoch + 1,
                velocities: sgd.velocities().to_vec(),
                rows: rows.clone(),
                best: None,
            };
            let interim = make_report(Stage::Pretrain, stage.seed, hash, &rows, None, 0.0);
            periodic_save(out_dir, Stage::Pretrain, cfg, params, &state, &interim)?;
        }
    }
    let state = TrainState {
        stage: Stage::Pretrain,
        next_epoch: end_epoch,
        velocities: sgd.velocities().to_vec(),
        rows: rows.clone(),
        best: None,
    };
    let report = make_report(
        Stage::Pretrain,
        stage.seed,
        hash,
        &rows,
        None,
        started.elapsed().as_secs_f64(),
    );
    Ok((report, state))
}

/// Stage 2: PK batches with identity + batch-hard triplet losses.
/// Attaches a classifier head sized for the training identities if one
/// is not already present; the contrastive temperature receives no
/// gradient in this stage and therefore stays frozen.
pub fn finetune(
    params: &mut Params,
    manifest: &SplitManifest,
    stats: &DatasetStats,
    cfg: &ModelConfig,
    stage: &StageConfig,
    resume: Option<TrainState>,
    out_dir: Option<&Path>,
) -> Result<(RunReport, TrainState)> {
    let started = Instant::now();
    let identities = manifest.train_identities();
    if identities.len() < 2 {
        return Err(Error::Invalid(
            "fine-tuning needs at least two training identities".into(),
        ));
    }
    let mut cfg_ft = cfg.clone();
    cfg_ft.num_classes = identities.len();
    let pp = PreprocessConfig::for_model(cfg.input_h, cfg.input_w);
    match &params.classifier {
        None => {
            params.attach_classifier(identities.len(), cfg.embed_dim, stage.seed);
            imprint_classifier(manifest, stats, params, &cfg_ft, &pp)?;
        }
        Some(head) => {
            if head.w.shape() != [cfg.embed_dim, identities.len()] {
                return Err(Error::Invalid(format!(
                    "classifier head shape {:?} does not match {} identities at dim {}",
                    head.w.shape(),
                    identities.len(),
                    cfg.embed_dim
                )));
            }
        }
    }
    let batches_per_epoch = identities.len() / stage.p;
    let total_steps = stage.epochs * batches_per_epoch;
    let mut sgd = Sgd::new(stage.momentum);
    sgd.weight_decay = stage.weight_decay;
    let mut start_epoch = 0usize;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut rows = Vec::new();
    if let Some(state) = resume {
        if state.stage != Stage::Finetune {
            return Err(Error::Invalid("resume state is not a finetune state".into()));
        }
        start_epoch = state.next_epoch;
        sgd.set_velocities(state.velocities);
        best = state.best;
        rows = state.rows;
    }
    let hash = config_hash(&cfg_ft.to_kv_block(), &stage.to_kv_block());
    let end_epoch = stage.stop_after.map_or(stage.epochs, |s| s.min(stage.epochs));
    let mut final_map = None;
    for epoch in start_epoch..end_epoch {
        let batches = pk_batches(manifest, stage.p, stage.k, stage.seed, epoch)?;
        let mut epoch_loss = 0.0f64;
        let mut epoch_lr = None;
        for (bi, batch) in batches.iter().enumerate() {
            let step = epoch * batches_per_epoch + bi;
            let lr = lr_schedule(step, total_steps, stage);
            epoch_lr.get_or_insert(lr);
            let mut aug_rng = named_rng(
                stage.seed,
                &format!("augment/finetune/epoch{epoch}/batch{bi}"),
            );
            let mut tensors = Vec::with_capacity(batch.len());
            let mut sizes = Vec::with_capacity(batch.len());
            for &(item_idx, _) in batch {
                let (t, size) =
                    training_tensor(manifest, stats, item_idx, &pp, &stage.augment, &mut aug_rng)?;
                tensors.push(t);
                sizes.push(size);
            }
            let labels: Vec<usize> = batch.iter().map(|&(_, class)| class).collect();
            let mut g = Graph::new();
            let pn = ParamNodes::bind(&mut g, params);
            let mut dropout_rng = (cfg_ft.dropout_rate > 0.0).then(|| {
                named_rng(
                    stage.seed,
                    &format!("dropout/finetune/epoch{epoch}/batch{bi}"),
                )
            });
            let inputs: Vec<ForwardInput> = batch
                .iter()
                .enumerate()
                .map(|(i, &(item_idx, _))| ForwardInput {
                    image: &tensors[i],
                    modality: manifest.items[item_idx].modality,
                    size: cfg_ft.use_size_embed.then_some(sizes[i]),
                })
                .collect();
            let feats =
                crate::model::batch_feature_node(&mut g, &pn, &inputs, &cfg_ft, dropout_rng.as_mut())?;
            let head = pn
                .classifier
                .as_ref()
                .expect("classifier bound for finetune");
            // same graph finetune_loss builds, split so the terms are loggable
            let id = id_loss(&mut g, feats, &labels, head)?;
            let tri = batch_hard_triplet_loss(&mut g, feats, &labels, stage.margin)?;
            let loss = g.add(id, tri)?;
            if std::env::var_os("TRANSOSS_DEBUG_LOSS").is_some() {
                eprintln!(
                    "debug epoch {epoch} batch {bi}: id={:.4} tri={:.4}",
                    g.scalar(id),
                    g.scalar(tri)
                );
            }
            let loss_value = g.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    items: batch.iter().map(|&(i, _)| i).collect(),
                });
            }
            g.backward(loss)?;
            pn.write_grads(&g, params);
            sgd_step_all(params, &mut sgd, lr)?;
            epoch_loss += loss_value;
        }
        rows.push(ReportRow {
            epoch,
            loss: epoch_loss / batches_per_epoch as f64,
            lr: epoch_lr.unwrap_or(0.0),
        });
        let last = epoch + 1 == stage.epochs;
        if stage.eval_every > 0 && ((epoch + 1) % stage.eval_every == 0 || last) {
            let set = embed_set(manifest, params, &cfg_ft, stats, &EvalConfig::default())?;
            let result = evaluate_set(&set, EvalMode::All)?;
            if best.as_ref().map_or(true, |(m, _)| result.map > *m) {
                best = Some((result.map, flatten_params(params)));
            }
        }
        if last || (stage.checkpoint_every > 0 && (epoch + 1) % stage.checkpoint_every == 0) {
            if last {
                // keep the best validation snapshot as the final params
                if let Some((map, blob)) = &best {
                    unflatten_params(params, blob)?;
                    final_map = Some(*map);
                }
            }
            let state = TrainState {
                stage: Stage::Finetune,
                next_epoch: epoch + 1,
                velocities: sgd.velocities().to_vec(),
                rows: rows.clone(),
                best: best.clone(),
            };
            let interim = make_report(Stage::Finetune, stage.seed, hash, &rows, final_map, 0.0);
            periodic_save(out_dir, Stage::Finetune, &cfg_ft, params, &state, &interim)?;
        }
    }
    let state = TrainState {
        stage: Stage::Finetune,
        next_epoch: end_epoch,
        velocities: sgd.velocities().to_vec(),
        rows: rows.clone(),
        best,
    };
    let report = make_report(
        Stage::Finetune,
        stage.seed,
        hash,
        &rows,
        final_map,
        started.elapsed().as_secs_f64(),
    );
    Ok((report, state))
}
