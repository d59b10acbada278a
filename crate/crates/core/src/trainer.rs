//! LAMB optimisation of the multi-task loss with linear warmup, plus a
//! versioned binary checkpoint.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::compute::{Graph, Mode, Scalar, Tensor};
use crate::corpus::{
    align_labels, build_batch, sample_window, window_at, AnnotatedRecord, CorpusError, Segmentation,
    TrainingWindow, WindowContext,
};
use crate::model::{LossBreakdown, Model, ModelConfig, ModelError};
use crate::tokenizer::PAD_ID;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CBAGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {name}; step skipped")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss at step {step}: {loss:?}")]
    NonFiniteLoss { step: u64, loss: LossBreakdown },
    #[error("invalid training config: {field} {msg}")]
    Config { field: &'static str, msg: String },
    #[error("no usable training records")]
    NoRecords,
    #[error("checkpoint config hash {found} does not match the current config {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for every parameter block, plus the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Rises linearly from 0 at step 0 to `peak` at `warmup`, then stays there.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> f64 {
    if warmup == 0 {
        return peak;
    }
    peak * step.min(warmup) as f64 / warmup as f64
}

/// Per-block trust ratios of the last update.
#[derive(Clone, Debug, Default)]
pub struct LambStats {
    pub trust_ratios: Vec<f64>,
}

/// One LAMB update with learning rate `lr`.
///
/// Each block gets `r = m̂ / (√v̂ + eps) + λ w` and moves by
/// `lr · ‖w‖ / ‖r‖ · r`; the ratio falls back to 1 when either norm is zero.
/// A non-finite gradient leaves parameters and state untouched.
pub fn lamb_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    names: &[String],
    state: &mut OptimizerState<T>,
    cfg: &LambConfig,
    lr: f64,
) -> Result<LambStats, TrainError> {
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(TrainError::NonFiniteGradient {
            name: names.get(i).cloned().unwrap_or_else(|| i.to_string()),
        });
    }
    let t = state.step + 1;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut stats = LambStats::default();
    for (((w, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let mut r = Vec::with_capacity(w.numel());
        let (mut w_sq, mut r_sq) = (0.0f64, 0.0f64);
        for (((wi, &gi), mi), vi) in w
            .data()
            .iter()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi.as_f64();
            let mn = cfg.beta1 * mi.as_f64() + (1.0 - cfg.beta1) * gi;
            let vn = cfg.beta2 * vi.as_f64() + (1.0 - cfg.beta2) * gi * gi;
            *mi = T::of(mn);
            *vi = T::of(vn);
            let wv = wi.as_f64();
            let ri = (mn / c1) / ((vn / c2).sqrt() + cfg.eps) + cfg.weight_decay * wv;
            w_sq += wv * wv;
            r_sq += ri * ri;
            r.push(ri);
        }
        let (wn, rn) = (w_sq.sqrt(), r_sq.sqrt());
        let ratio = if wn > 0.0 && rn > 0.0 { wn / rn } else { 1.0 };
        for (wi, ri) in w.data_mut().iter_mut().zip(r) {
            *wi = T::of(wi.as_f64() - lr * ratio * ri);
        }
        stats.trust_ratios.push(ratio);
    }
    state.step = t;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub lamb: LambConfig,
    pub seed: u64,
    /// Share of the records making up one checkpoint epoch.
    pub epoch_fraction: f64,
    /// Temperature of sampled subword segmentation; `None` uses Viterbi.
    pub segmentation_temperature: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            peak_lr: 1e-3,
            warmup: 500,
            lamb: LambConfig::default(),
            seed: 0,
            epoch_fraction: 0.05,
            segmentation_temperature: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, msg: String| Err(TrainError::Config { field, msg });
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr", format!("{} is not a positive number", self.peak_lr));
        }
        if !(self.epoch_fraction > 0.0 && self.epoch_fraction <= 1.0) {
            return bad("epoch_fraction", format!("{} is outside (0, 1]", self.epoch_fraction));
        }
        if let Some(t) = self.segmentation_temperature {
            if !(t > 0.0) {
                return bad("segmentation_temperature", format!("{t} is not positive"));
            }
        }
        let l = &self.lamb;
        if !(0.0..1.0).contains(&l.beta1) || !(0.0..1.0).contains(&l.beta2) {
            return bad("lamb", "betas must lie in [0, 1)".into());
        }
        if l.eps < 0.0 || l.weight_decay < 0.0 {
            return bad("lamb", "eps and weight_decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn segmentation(&self) -> Segmentation {
        match self.segmentation_temperature {
            Some(temperature) => Segmentation::Sampled { temperature },
            None => Segmentation::Viterbi,
        }
    }
}

/// Hex SHA-256 of the serialized model and training configs.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let digest = Sha256::new()
        .chain_update(serde_json::to_vec(model).expect("config serializes"))
        .chain_update(b"\n")
        .chain_update(serde_json::to_vec(train).expect("config serializes"))
        .finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Text forms of the tokenizer and vocabularies a model was trained with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assets {
    pub tokenizer: String,
    pub conditions: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    config_hash: String,
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    records_seen: u64,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    tensors: Vec<TensorEntry>,
    assets: Option<Assets>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub train: TrainConfig,
    pub optimizer: OptimizerState<T>,
    pub rng: ChaCha8Rng,
    pub records_seen: u64,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub assets: Option<Assets>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn config_hash(&self) -> String {
        config_hash(self.model.config(), &self.train)
    }

    /// Magic, version, manifest length and JSON manifest, then the
    /// parameters, first moments and second moments as little-endian values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            dtype: T::DTYPE.to_string(),
            config_hash: self.config_hash(),
            model: self.model.config().clone(),
            train: self.train.clone(),
            step: self.optimizer.step,
            records_seen: self.records_seen,
            order: self.order.clone(),
            cursor: self.cursor,
            rng: self.rng.clone(),
            tensors: self
                .model
                .names()
                .iter()
                .zip(self.model.params())
                .map(|(name, p)| TensorEntry {
                    name: name.clone(),
                    shape: p.shape().to_vec(),
                })
                .collect(),
            assets: self.assets.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for set in [self.model.params(), &self.optimizer.m, &self.optimizer.v] {
            for t in set {
                for &x in t.data() {
                    x.write_le(&mut out);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| TrainError::Checkpoint(format!("manifest: {e}")))?;
        if manifest.dtype != T::DTYPE {
            return Err(TrainError::Checkpoint(format!(
                "stored as {}, requested {}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let mut payload = &bytes[20 + len..];
        let mut read_set = || -> Result<Vec<Tensor<T>>, TrainError> {
            let mut set = Vec::with_capacity(manifest.tensors.len());
            for entry in &manifest.tensors {
                let n: usize = entry.shape.iter().product();
                let size = n * T::BYTES;
                if payload.len() < size {
                    return Err(TrainError::Checkpoint(format!("truncated payload at {}", entry.name)));
                }
                let data = payload[..size].chunks_exact(T::BYTES).map(T::read_le).collect();
                payload = &payload[size..];
                set.push(Tensor::new(entry.shape.clone(), data).map_err(ModelError::from)?);
            }
            Ok(set)
        };
        let params = read_set()?;
        let m = read_set()?;
        let v = read_set()?;
        if !payload.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        let model = Model::from_parts(manifest.model, params)?;
        let ckpt = Self {
            model,
            train: manifest.train,
            optimizer: OptimizerState {
                m,
                v,
                step: manifest.step,
            },
            rng: manifest.rng,
            records_seen: manifest.records_seen,
            order: manifest.order,
            cursor: manifest.cursor,
            assets: manifest.assets,
        };
        if ckpt.config_hash() != manifest.config_hash {
            return Err(TrainError::ConfigMismatch {
                expected: ckpt.config_hash(),
                found: manifest.config_hash,
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads a checkpoint and refuses it unless it was written under the
    /// same model and training configs.
    pub fn load_matching(
        path: impl AsRef<Path>,
        model: &ModelConfig,
        train: &TrainConfig,
    ) -> Result<Self, TrainError> {
        let ckpt = Self::load(path)?;
        let expected = config_hash(model, train);
        if ckpt.config_hash() != expected {
            return Err(TrainError::ConfigMismatch {
                expected,
                found: ckpt.config_hash(),
            });
        }
        Ok(ckpt)
    }
}

/// Single-writer training loop over a fixed record set.
pub struct Trainer<'a> {
    model: Model<f32>,
    optimizer: OptimizerState<f32>,
    config: TrainConfig,
    records: Vec<&'a AnnotatedRecord>,
    ctx: WindowContext<'a>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    records_seen: u64,
    assets: Option<Assets>,
}

impl<'a> Trainer<'a> {
    /// Records that cannot form a window (too short, or a year outside the
    /// condition index) are dropped with a warning.
    pub fn new(
        model: Model<f32>,
        config: TrainConfig,
        records: &'a [AnnotatedRecord],
        ctx: WindowContext<'a>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let usable = Self::usable(records, &ctx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng);
        let optimizer = OptimizerState::new(model.params());
        Ok(Self {
            model,
            optimizer,
            config,
            records: usable,
            ctx,
            rng,
            order,
            cursor: 0,
            records_seen: 0,
            assets: None,
        })
    }

    /// Continues from a checkpoint; the record set must be the one it was trained on.
    pub fn resume(
        ckpt: Checkpoint<f32>,
        records: &'a [AnnotatedRecord],
        ctx: WindowContext<'a>,
    ) -> Result<Self, TrainError> {
        ckpt.train.validate()?;
        let usable = Self::usable(records, &ctx)?;
        if ckpt.order.len() != usable.len() || ckpt.cursor > usable.len() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint covers {} records, {} supplied",
                ckpt.order.len(),
                usable.len()
            )));
        }
        Ok(Self {
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            config: ckpt.train,
            records: usable,
            ctx,
            rng: ckpt.rng,
            order: ckpt.order,
            cursor: ckpt.cursor,
            records_seen: ckpt.records_seen,
            assets: ckpt.assets,
        })
    }

    fn usable(
        records: &'a [AnnotatedRecord],
        ctx: &WindowContext<'a>,
    ) -> Result<Vec<&'a AnnotatedRecord>, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            match sample_window(r, &WindowContext { segmentation: Segmentation::Viterbi, ..*ctx }, &mut rng) {
                Ok(_) => out.push(r),
                Err(e) => log::warn!("record {} skipped: {e}", r.id),
            }
        }
        if out.is_empty() {
            return Err(TrainError::NoRecords);
        }
        Ok(out)
    }

    pub fn with_assets(mut self, assets: Assets) -> Self {
        self.assets = Some(assets);
        self
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    pub fn records_seen(&self) -> u64 {
        self.records_seen
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    fn next_record(&mut self) -> &'a AnnotatedRecord {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let r = self.records[self.order[self.cursor]];
        self.cursor += 1;
        self.records_seen += 1;
        r
    }

    /// Samples a batch of fresh windows, computes the loss and takes one LAMB step.
    pub fn step(&mut self) -> Result<StepLog, TrainError> {
        let ctx = WindowContext {
            segmentation: self.config.segmentation(),
            ..self.ctx
        };
        let mut windows = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let r = self.next_record();
            windows.push(sample_window(r, &ctx, &mut self.rng)?);
        }
        let batch = build_batch(&windows, PAD_ID)?;
        let mut g = Graph::new(Mode::Train);
        let vars = self.model.bind(&mut g, true);
        let heads = self.model.forward(&mut g, &vars, &batch.model_input(), &mut self.rng)?;
        let lv = self.model.loss(&mut g, &heads, &batch.targets())?;
        let loss = LossBreakdown::read(&g, &lv);
        let next = self.optimizer.step + 1;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: next, loss });
        }
        g.backward(lv.total).map_err(ModelError::from)?;
        let grads: Vec<Tensor<f32>> = vars
            .iter()
            .zip(self.model.params())
            .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let lr = lr_at(next, self.config.peak_lr, self.config.warmup);
        let names = self.model.names().to_vec();
        lamb_step(
            self.model.params_mut(),
            &grads,
            &names,
            &mut self.optimizer,
            &self.config.lamb,
            lr,
        )?;
        Ok(StepLog {
            step: next,
            lr,
            loss,
        })
    }

    /// Number of records in one checkpoint epoch.
    pub fn epoch_records(&self) -> u64 {
        ((self.config.epoch_fraction * self.records.len() as f64).ceil() as u64).max(1)
    }

    /// Runs `steps` updates, reporting each one. With a checkpoint directory,
    /// a checkpoint is written whenever another epoch's worth of records has
    /// been seen, and once more at the end.
    pub fn run(
        &mut self,
        steps: u64,
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<Vec<PathBuf>, TrainError> {
        let epoch = self.epoch_records();
        let mut written = Vec::new();
        for _ in 0..steps {
            let before = self.records_seen / epoch;
            let log = self.step()?;
            on_step(&log);
            if let Some(dir) = checkpoint_dir {
                if self.records_seen / epoch > before {
                    written.push(self.save_into(dir)?);
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            let last = self.save_into(dir)?;
            if written.last() != Some(&last) {
                written.push(last);
            }
        }
        Ok(written)
    }

    fn save_into(&self, dir: &Path) -> Result<PathBuf, TrainError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("step-{:08}.ckpt", self.optimizer.step));
        self.checkpoint().save(&path)?;
        std::fs::copy(&path, dir.join("latest.ckpt"))?;
        Ok(path)
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            optimizer: self.optimizer.clone(),
            rng: self.rng.clone(),
            records_seen: self.records_seen,
            order: self.order.clone(),
            cursor: self.cursor,
            assets: self.assets.clone(),
        }
    }

    /// Every sentence-start window of every record, segmented by Viterbi.
    pub fn all_windows(&self) -> Result<Vec<TrainingWindow>, TrainError> {
        all_windows(self.records.iter().copied(), &self.ctx)
    }
}

/// Every sentence-start window of the given records under Viterbi segmentation.
pub fn all_windows<'r>(
    records: impl IntoIterator<Item = &'r AnnotatedRecord>,
    ctx: &WindowContext<'_>,
) -> Result<Vec<TrainingWindow>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();
    for r in records {
        let stream = align_labels(r, ctx.tokenizer, ctx.labels, Segmentation::Viterbi, &mut rng)?;
        let conds = ctx.conditions.lookup(r.year, &r.keywords).map_err(CorpusError::from)?;
        for k in 0..stream.sentence_starts.len() {
            out.push(window_at(&stream, k, ctx.n, conds.clone()));
        }
    }
    Ok(out)
}

/// Evaluation-mode loss averaged over windows, in batches of `batch_size`.
/// Each task term is weighted by the number of positions it covers.
pub fn evaluate_windows<T: Scalar>(
    model: &Model<T>,
    windows: &[TrainingWindow],
    batch_size: usize,
) -> Result<LossBreakdown, TrainError> {
    let mut sum = LossBreakdown::default();
    let mut positions = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = build_batch(chunk, PAD_ID)?;
        let n = batch.mask.iter().filter(|&&m| m).count();
        let l = model.evaluate_loss(&batch)?;
        sum.total += l.total * n as f64;
        sum.token += l.token * n as f64;
        sum.pos += l.pos * n as f64;
        sum.dep += l.dep * n as f64;
        sum.ent += l.ent * n as f64;
        positions += n;
    }
    if positions == 0 {
        return Err(TrainError::Corpus(CorpusError::EmptyBatch));
    }
    let p = positions as f64;
    Ok(LossBreakdown {
        total: sum.total / p,
        token: sum.token / p,
        pos: sum.pos / p,
        dep: sum.dep / p,
        ent: sum.ent / p,
    })
}
