//! Deterministic training of fusion weights and heads over frozen stacks.
//!
//! Everything that influences a run lives in the [`Checkpoint`]: config,
//! parameters, optimizer moments, the data-order RNG position and the current
//! epoch permutation. Resuming from a checkpoint therefore continues the exact
//! trajectory of the uninterrupted run. Per-record work inside a batch may run
//! on a thread pool, but results are always reduced in record order.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::evalreport::{accuracy, corpus_wer, edit_distance, weight_report, MetricRow, WeightReport};
use crate::fusion::FusionMode;
use crate::heads::ctc_greedy_decode;
use crate::model::{task_loss, FusionModel, GroupKind};
use crate::numerics::argmax;
use crate::stackio::{load_stack, Label, LayerStack, Manifest, TaskKind};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCK1";
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Fraction of the manifest (taken from its end) held out for evaluation.
pub const HELDOUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'; valid: sgd, adam"))),
        }
    }
}

pub fn parse_task(s: &str) -> Result<TaskKind> {
    match s.trim().to_ascii_lowercase().as_str() {
        "sid" | "utterance-classification" => Ok(TaskKind::UtteranceClassification),
        "asr" | "sequence-transcription" => Ok(TaskKind::SequenceTranscription),
        other => Err(Error::Config(format!("unknown task '{other}'; valid: sid, asr"))),
    }
}

pub fn task_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::UtteranceClassification => "sid",
        TaskKind::SequenceTranscription => "asr",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: FusionMode,
    pub task: TaskKind,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_fusion: f64,
    pub p_learnable: bool,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub eval_every: u64,
    /// 1-based subset of the manifest's models to train on; all when `None`.
    pub models: Option<Vec<usize>>,
}

impl TrainConfig {
    /// Task-dependent defaults: learning rate 0.1 for classification and
    /// 1e-4 for transcription, Adam, 2000 steps of batch 8, fixed uniform `p`.
    pub fn new(mode: FusionMode, task: TaskKind) -> Self {
        let lr = match task {
            TaskKind::UtteranceClassification => 0.1,
            TaskKind::SequenceTranscription => 1e-4,
        };
        Self {
            mode,
            task,
            steps: 2000,
            batch_size: 8,
            lr_head: lr,
            lr_fusion: lr,
            p_learnable: false,
            optimizer: Optimizer::Adam,
            seed: 0,
            eval_every: 200,
            models: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.lr_head >= 0.0 && self.lr_fusion >= 0.0) || !self.lr_head.is_finite() || !self.lr_fusion.is_finite() {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if let Some(models) = &self.models {
            if models.is_empty() || models.contains(&0) {
                return Err(Error::Config("models are 1-based and the list must be non-empty".into()));
            }
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "task",
        "steps",
        "batch_size",
        "lr_head",
        "lr_fusion",
        "p_learnable",
        "optimizer",
        "seed",
        "eval_every",
        "models",
    ];

    /// Reads a flat key-value file. `mode` and `task` are required; other
    /// keys override the task defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(Self::KEYS)?;
        let mode: FusionMode = kv
            .get::<String>("mode")?
            .ok_or_else(|| Error::Config("missing key 'mode'".into()))?
            .parse()?;
        let task = parse_task(
            &kv.get::<String>("task")?
                .ok_or_else(|| Error::Config("missing key 'task'".into()))?,
        )?;
        let mut c = Self::new(mode, task);
        c.steps = kv.get("steps")?.unwrap_or(c.steps);
        c.batch_size = kv.get("batch_size")?.unwrap_or(c.batch_size);
        c.lr_head = kv.get("lr_head")?.unwrap_or(c.lr_head);
        c.lr_fusion = kv.get("lr_fusion")?.unwrap_or(c.lr_fusion);
        c.p_learnable = kv.get("p_learnable")?.unwrap_or(c.p_learnable);
        c.optimizer = kv.get::<String>("optimizer")?.map(|s| s.parse()).transpose()?.unwrap_or(c.optimizer);
        c.seed = kv.get("seed")?.unwrap_or(c.seed);
        c.eval_every = kv.get("eval_every")?.unwrap_or(c.eval_every);
        c.models = kv.get_list("models")?.or(c.models);
        c.validate()?;
        Ok(c)
    }
}

/// One utterance with its (selected) stacks in memory.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub label: Label,
    pub stacks: Vec<LayerStack>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split '{other}'; valid: train, heldout, all"))),
        }
    }
}

/// A manifest loaded into memory. Classification stacks are stored pooled
/// over frames (`T = 1`), which is exact because fusion is linear and the
/// utterance head mean-pools first.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: TaskKind,
    pub label_count: usize,
    /// `(L, d)` per selected model.
    pub model_dims: Vec<(usize, usize)>,
    pub examples: Vec<Example>,
    /// The first `train_len` examples form the training split.
    pub train_len: usize,
}

impl Dataset {
    pub fn load(manifest: &Manifest, models: Option<&[usize]>) -> Result<Self> {
        if manifest.records.is_empty() {
            return Err(Error::Config("manifest has no records".into()));
        }
        let m = manifest.model_count();
        let selected: Vec<usize> = match models {
            Some(sel) => {
                if let Some(bad) = sel.iter().find(|&&i| i == 0 || i > m) {
                    return Err(Error::Config(format!("model {bad} outside 1..={m}")));
                }
                sel.iter().map(|i| i - 1).collect()
            }
            None => (0..m).collect(),
        };
        let mut model_dims: Vec<(usize, usize)> = Vec::new();
        let mut examples = Vec::with_capacity(manifest.records.len());
        for record in &manifest.records {
            let mut stacks = Vec::with_capacity(selected.len());
            for (k, &i) in selected.iter().enumerate() {
                let s = load_stack(&record.stack_paths[i])?;
                let dims = (s.layers(), s.dim());
                match model_dims.get(k) {
                    None => model_dims.push(dims),
                    Some(&want) if want != dims => {
                        return Err(Error::Validation(format!(
                            "record {}: model {} has (L, d) = {dims:?}, earlier records have {want:?}",
                            record.id,
                            i + 1
                        )))
                    }
                    _ => {}
                }
                stacks.push(s);
            }
            if stacks.windows(2).any(|w| w[0].frames() != w[1].frames()) {
                return Err(Error::Validation(format!(
                    "record {}: models disagree on frame count {:?}",
                    record.id,
                    stacks.iter().map(LayerStack::frames).collect::<Vec<_>>()
                )));
            }
            if manifest.task_kind == TaskKind::UtteranceClassification {
                stacks = stacks.iter().map(LayerStack::pooled).collect();
            }
            examples.push(Example {
                id: record.id.clone(),
                label: record.label.clone(),
                stacks,
            });
        }
        let n = examples.len();
        let heldout = (n as f64 * HELDOUT_FRACTION).floor() as usize;
        Ok(Self {
            task: manifest.task_kind,
            label_count: manifest.label_count,
            model_dims,
            examples,
            train_len: n - heldout,
        })
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.examples[..self.train_len],
            Split::Heldout => &self.examples[self.train_len..],
            Split::All => &self.examples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// All state of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub task: TaskKind,
    pub label_count: usize,
    pub model_dims: Vec<(usize, usize)>,
    pub model: FusionModel,
    pub optimizer: OptimizerState,
    pub step: u64,
    /// Position of the data-order RNG (seeded from `config.seed`), as
    /// `(high, low)` halves of the ChaCha word position.
    pub rng_word_pos: (u64, u64),
    /// Current epoch permutation of training indices and the next position.
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl Checkpoint {
    /// `FCK1`, payload length as little-endian u64, then the JSON payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = serde_json::to_vec(self).expect("checkpoint serializes");
        let mut out = Vec::with_capacity(12 + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not an FCK1 checkpoint"));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        if bytes.len() - 12 != len {
            return Err(Error::format(
                path,
                format!("payload length {len} but {} bytes follow the header", bytes.len() - 12),
            ));
        }
        serde_json::from_slice(&bytes[12..]).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn weight_report(&self) -> Result<WeightReport> {
        let counts: Vec<usize> = self.model_dims.iter().map(|d| d.0).collect();
        weight_report(&self.model, self.task, &counts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub metric_name: &'static str,
    pub metric_value: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss", "metric_name", "metric_value"]).unwrap();
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.metric_name.to_string(),
            r.metric_value.to_string(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Evaluation of a model on a set of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metric_name: &'static str,
    pub metric_value: f64,
    pub records: Vec<MetricRow>,
}

/// Runs `f` over `items`, optionally on a pool, returning results in input
/// order.
fn map_ordered<T: Sync, U: Send>(
    items: &[T],
    pool: Option<&rayon::ThreadPool>,
    f: impl Fn(&T) -> U + Sync + Send,
) -> Vec<U> {
    use rayon::prelude::*;
    match pool {
        Some(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

fn build_pool(threads: usize) -> Option<rayon::ThreadPool> {
    (threads > 1).then(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

pub fn evaluate(model: &FusionModel, examples: &[Example], threads: usize) -> Result<Evaluation> {
    evaluate_with(model, examples, build_pool(threads).as_ref())
}

fn evaluate_with(model: &FusionModel, examples: &[Example], pool: Option<&rayon::ThreadPool>) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Domain("evaluation over zero records".into()));
    }
    let outputs = map_ordered(examples, pool, |ex| -> Result<(f64, Vec<usize>)> {
        let post = model.posterior(&ex.stacks)?;
        let loss = task_loss(&post, &ex.label)?.loss;
        let hyp = match ex.label {
            Label::Class(_) => vec![argmax(post.row(0))],
            Label::Transcript(_) => ctc_greedy_decode(&post),
        };
        Ok((loss, hyp))
    });
    let mut total_loss = 0.0;
    let mut hyps = Vec::with_capacity(examples.len());
    for out in outputs {
        let (loss, hyp) = out?;
        total_loss += loss;
        hyps.push(hyp);
    }
    let mut records = Vec::with_capacity(examples.len() + 1);
    let (metric_name, metric_value) = match examples[0].label {
        Label::Class(_) => {
            let mut preds = Vec::with_capacity(examples.len());
            let mut refs = Vec::with_capacity(examples.len());
            for (ex, hyp) in examples.iter().zip(&hyps) {
                let Label::Class(c) = ex.label else {
                    return Err(Error::Label(format!("record {} is not a class label", ex.id)));
                };
                preds.push(hyp[0]);
                refs.push(c);
                records.push(MetricRow {
                    record_id: ex.id.clone(),
                    metric: "correct".into(),
                    value: f64::from(u8::from(hyp[0] == c)),
                });
            }
            ("accuracy", accuracy(&preds, &refs)?)
        }
        Label::Transcript(_) => {
            let mut pairs = Vec::with_capacity(examples.len());
            for (ex, hyp) in examples.iter().zip(&hyps) {
                let Label::Transcript(y) = &ex.label else {
                    return Err(Error::Label(format!("record {} is not a transcript", ex.id)));
                };
                records.push(MetricRow {
                    record_id: ex.id.clone(),
                    metric: "edits".into(),
                    value: edit_distance(y, hyp) as f64,
                });
                records.push(MetricRow {
                    record_id: ex.id.clone(),
                    metric: "ref_tokens".into(),
                    value: y.len() as f64,
                });
                pairs.push((hyp.as_slice(), y.as_slice()));
            }
            ("wer", corpus_wer(pairs)?)
        }
    };
    records.push(MetricRow {
        record_id: "corpus".into(),
        metric: metric_name.into(),
        value: metric_value,
    });
    Ok(Evaluation {
        loss: total_loss / examples.len() as f64,
        metric_name,
        metric_value,
        records,
    })
}

/// One optimizer update from the mean gradient over `batch`. Returns the mean
/// batch loss.
pub fn train_step(
    model: &mut FusionModel,
    optimizer: &mut OptimizerState,
    config: &TrainConfig,
    batch: &[&Example],
    step: u64,
) -> Result<f64> {
    train_step_with(model, optimizer, config, batch, step, None)
}

fn train_step_with(
    model: &mut FusionModel,
    optimizer: &mut OptimizerState,
    config: &TrainConfig,
    batch: &[&Example],
    step: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<f64> {
    let n = model.param_count();
    let per_record = {
        let model = &*model;
        map_ordered(batch, pool, |ex| model.loss_and_grad(&ex.stacks, &ex.label))
    };
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for r in per_record {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    loss *= scale;
    grad.iter_mut().for_each(|g| *g *= scale);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training {
            step,
            message: format!("non-finite loss {loss} or gradient"),
            records: batch.iter().map(|ex| ex.id.clone()).collect(),
        });
    }

    let mut params = model.flat_params();
    if optimizer.m.len() != n {
        optimizer.m = vec![0.0; n];
        optimizer.v = vec![0.0; n];
    }
    optimizer.t += 1;
    let t = optimizer.t as i32;
    let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    for group in model.param_groups() {
        if !group.trainable {
            continue;
        }
        let lr = match group.kind {
            GroupKind::Fusion => config.lr_fusion,
            GroupKind::Head => config.lr_head,
        };
        for k in group.range {
            match config.optimizer {
                Optimizer::Sgd => params[k] -= lr * grad[k],
                Optimizer::Adam => {
                    let g = grad[k];
                    optimizer.m[k] = ADAM_BETA1 * optimizer.m[k] + (1.0 - ADAM_BETA1) * g;
                    optimizer.v[k] = ADAM_BETA2 * optimizer.v[k] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = optimizer.m[k] / bc1;
                    let v_hat = optimizer.v[k] / bc2;
                    params[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    model.set_flat_params(&params)?;
    Ok(loss)
}

/// A run in progress over an in-memory dataset.
pub struct Trainer<'a> {
    data: &'a Dataset,
    state: Checkpoint,
    rng: ChaCha8Rng,
    pool: Option<rayon::ThreadPool>,
}

fn split_word_pos(pos: u128) -> (u64, u64) {
    ((pos >> 64) as u64, pos as u64)
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if config.task != data.task {
            return Err(Error::Config(format!(
                "config task {} does not match manifest task {}",
                task_name(config.task),
                task_name(data.task)
            )));
        }
        if data.train_len == 0 {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = FusionModel::init(
            config.mode,
            config.task,
            &data.model_dims,
            data.label_count,
            config.p_learnable,
            &mut rng,
        )?;
        let mut order: Vec<usize> = (0..data.train_len).collect();
        order.shuffle(&mut rng);
        let n = model.param_count();
        let state = Checkpoint {
            task: data.task,
            label_count: data.label_count,
            model_dims: data.model_dims.clone(),
            model,
            optimizer: OptimizerState {
                t: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
            step: 0,
            rng_word_pos: split_word_pos(rng.get_word_pos()),
            order,
            cursor: 0,
            config,
        };
        Ok(Self {
            data,
            state,
            rng,
            pool: None,
        })
    }

    pub fn resume(checkpoint: Checkpoint, data: &'a Dataset) -> Result<Self> {
        if checkpoint.model_dims != data.model_dims || checkpoint.task != data.task {
            return Err(Error::Config("checkpoint does not match the dataset".into()));
        }
        if checkpoint.order.len() != data.train_len {
            return Err(Error::Config("checkpoint training split differs from the dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(checkpoint.config.seed);
        let (hi, lo) = checkpoint.rng_word_pos;
        rng.set_word_pos((u128::from(hi) << 64) | u128::from(lo));
        Ok(Self {
            data,
            state: checkpoint,
            rng,
            pool: None,
        })
    }

    /// Per-record work runs on `threads` workers; results do not depend on it.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.pool = build_pool(threads);
        self
    }

    pub fn model(&self) -> &FusionModel {
        &self.state.model
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.state.clone();
        c.rng_word_pos = split_word_pos(self.rng.get_word_pos());
        c
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let size = self.state.config.batch_size;
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.state.cursor == self.state.order.len() {
                self.state.order.shuffle(&mut self.rng);
                self.state.cursor = 0;
            }
            batch.push(self.state.order[self.state.cursor]);
            self.state.cursor += 1;
        }
        batch
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let idx = self.next_batch();
        let batch: Vec<&Example> = idx.iter().map(|&i| &self.data.examples[i]).collect();
        let step = self.state.step + 1;
        let loss = train_step_with(
            &mut self.state.model,
            &mut self.state.optimizer,
            &self.state.config,
            &batch,
            step,
            self.pool.as_ref(),
        )?;
        self.state.step = step;
        Ok(loss)
    }

    pub fn evaluate(&self, split: Split) -> Result<Evaluation> {
        evaluate_with(&self.state.model, self.data.split(split), self.pool.as_ref())
    }

    /// Trains until `config.steps`, evaluating the held-out split every
    /// `eval_every` steps and at the final step.
    pub fn run(&mut self) -> Result<Vec<TraceRow>> {
        let total = self.state.config.steps;
        let every = self.state.config.eval_every;
        let heldout = if self.data.split(Split::Heldout).is_empty() {
            Split::Train
        } else {
            Split::Heldout
        };
        let mut trace = Vec::new();
        while self.state.step < total {
            self.step()?;
            let s = self.state.step;
            if s.is_multiple_of(every) || s == total {
                let e = self.evaluate(heldout)?;
                trace.push(TraceRow {
                    step: s,
                    loss: e.loss,
                    metric_name: e.metric_name,
                    metric_value: e.metric_value,
                });
            }
        }
        Ok(trace)
    }

    /// Moves the target step count, e.g. to continue a resumed run.
    pub fn set_total_steps(&mut self, steps: u64) {
        self.state.config.steps = steps;
    }
}

/// Full run from scratch.
pub fn train(config: TrainConfig, data: &Dataset, threads: usize) -> Result<(Checkpoint, Vec<TraceRow>)> {
    let mut trainer = Trainer::new(config, data)?.with_threads(threads);
    let trace = trainer.run()?;
    Ok((trainer.checkpoint(), trace))
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Head scalars beyond this count are subsampled (seeded).
    pub max_head_coords: usize,
    pub seed: u64,
    /// Multiplies analytic gradients before comparison; used to confirm the
    /// check can fail.
    pub fault_scale: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            max_head_coords: 200,
            seed: 0,
            fault_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index within the group of the worst coordinate.
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences against analytic gradients for every trainable scalar
/// of `model` on one example.
pub fn grad_check_model(model: &FusionModel, example: &Example, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (_, mut analytic) = model.loss_and_grad(&example.stacks, &example.label)?;
    if let Some(s) = opts.fault_scale {
        analytic.iter_mut().for_each(|g| *g *= s);
    }
    let base = model.flat_params();
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups = Vec::new();
    for group in model.param_groups() {
        if !group.trainable || group.range.is_empty() {
            continue;
        }
        let mut coords: Vec<usize> = group.range.clone().collect();
        if group.kind == GroupKind::Head && coords.len() > opts.max_head_coords {
            coords.shuffle(&mut rng);
            coords.truncate(opts.max_head_coords);
            coords.sort_unstable();
        }
        let mut check = GroupCheck {
            name: group.name.clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: None,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for k in coords {
            let mut params = base.clone();
            params[k] = base[k] + opts.step;
            probe.set_flat_params(&params)?;
            let up = probe.loss(&example.stacks, &example.label)?;
            params[k] = base[k] - opts.step;
            probe.set_flat_params(&params)?;
            let down = probe.loss(&example.stacks, &example.label)?;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(analytic[k], numeric);
            if check.worst_index.is_none() || err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = Some(k - group.range.start);
                check.worst_analytic = analytic[k];
                check.worst_numeric = numeric;
            }
        }
        groups.push(check);
    }
    Ok(GradCheckReport {
        groups,
        tolerance: opts.tolerance,
    })
}

/// Builds a model as training would, then draws random fusion logits and head
/// biases (seeded) so no gradient is trivially symmetric, and checks it.
pub fn grad_check(
    config: &TrainConfig,
    example: &Example,
    model_dims: &[(usize, usize)],
    label_count: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = FusionModel::init(config.mode, config.task, model_dims, label_count, config.p_learnable, &mut rng)?;
    let mut perturb = |v: &mut f64| *v = 0.5 * rng.sample::<f64, _>(StandardNormal);
    model.fusion.layer_logits.iter_mut().flatten().for_each(&mut perturb);
    model.fusion.model_logits.iter_mut().for_each(&mut perturb);
    for h in &mut model.heads {
        h.bias.iter_mut().for_each(&mut perturb);
    }
    grad_check_model(&model, example, opts)
}
