//! AdamW training with warmup/decay schedules, global-norm clipping,
//! staged context extension and checkpointing.

mod checkpoint;
mod optim;
mod schedule;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use optim::{adamw_step, clip_global_norm, global_norm, AdamMoments};
pub use schedule::lr_at;

use crate::error::{Error, Result};
use crate::kernels::{Graph, Tensor, Var};
use crate::model::{BoundModel, ModelConfig, ModelState};
use crate::tokenizer::{TokenId, TokenShard, Vocabulary};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    #[default]
    Cosine,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
    #[serde(default)]
    pub decay: DecayKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk_base()
    }
}

impl TrainConfig {
    /// Base pretraining plan at full scale: 19k iterations, batch 128.
    pub fn full_scale_base() -> Self {
        TrainConfig {
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            max_grad_norm: 1.0,
            lr_peak: 4.8e-4,
            lr_min: 4.8e-5,
            warmup_iters: 1000,
            total_iters: 19_000,
            decay: DecayKind::Cosine,
            seed: 0,
        }
    }

    /// Context-extension plan at full scale, batch 32.
    pub fn full_scale_extension(warmup_iters: u64, total_iters: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            lr_peak: 1e-4,
            lr_min: 4e-5,
            warmup_iters,
            total_iters,
            ..TrainConfig::full_scale_base()
        }
    }

    /// Desk-scale base stage: same optimizer, shrunk iteration budget.
    pub fn desk_base() -> Self {
        TrainConfig {
            batch_size: 8,
            warmup_iters: 50,
            total_iters: 1000,
            ..TrainConfig::full_scale_base()
        }
    }

    /// Desk-scale extension stage.
    pub fn desk_extension() -> Self {
        TrainConfig {
            batch_size: 4,
            ..TrainConfig::full_scale_extension(20, 200)
        }
    }

    /// Finetuning defaults: lr 1e-4 with linear decay, betas 0.9/0.999, no
    /// weight decay, warmup over the first 10% of `total_iters`.
    pub fn finetune(total_iters: u64) -> Self {
        TrainConfig {
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            lr_peak: 1e-4,
            lr_min: 0.0,
            warmup_iters: total_iters / 10,
            total_iters,
            decay: DecayKind::Linear,
            seed: 0,
        }
    }

    /// Finetuning variant for species-style tasks: lr 1e-5, cosine decay.
    pub fn finetune_species(total_iters: u64) -> Self {
        TrainConfig {
            lr_peak: 1e-5,
            decay: DecayKind::Cosine,
            ..TrainConfig::finetune(total_iters)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid_arg(m));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if self.warmup_iters > self.total_iters {
            return bad(format!(
                "warmup_iters {} exceeds total_iters {}",
                self.warmup_iters, self.total_iters
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.eps > 0.0) || !(self.max_grad_norm > 0.0) || self.weight_decay < 0.0 {
            return bad(format!(
                "eps {}, max_grad_norm {} and weight_decay {} must be positive",
                self.eps, self.max_grad_norm, self.weight_decay
            ));
        }
        if !(self.lr_peak >= 0.0) || !(self.lr_min >= 0.0) {
            return bad(format!("learning rates {} / {} must be non-negative", self.lr_peak, self.lr_min));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub ppl: f64,
    pub grad_norm: f64,
    pub tokens_seen: u64,
    pub wall_ms: u64,
}

/// Appends [`StepRecord`]s as JSON lines.
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(out: W) -> Self {
        MetricsLog { out }
    }

    pub fn write(&mut self, record: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Called after every update; an error aborts training.
pub type StepCallback<'a> = &'a mut dyn FnMut(&StepRecord) -> Result<()>;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Stop after this many updates in this call, even if the schedule continues.
    pub stop_after: Option<u64>,
    pub on_step: Option<StepCallback<'a>>,
}

/// Targets and loss mask for next-token prediction over equal-length sequences:
/// row `i` predicts token `i + 1`; the last row of each sequence and PAD/UNK
/// targets are masked.
pub fn next_token_targets(batch: &[&[TokenId]]) -> (Vec<u32>, Vec<bool>) {
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for seq in batch {
        for i in 0..seq.len() {
            match seq.get(i + 1) {
                Some(&next) => {
                    targets.push(next as u32);
                    mask.push(Vocabulary::is_scored(next));
                }
                None => {
                    targets.push(0);
                    mask.push(false);
                }
            }
        }
    }
    (targets, mask)
}

/// Mean next-token cross-entropy over a batch, as a graph node.
pub fn lm_loss(g: &mut Graph, model: &ModelState, bound: &BoundModel, batch: &[&[TokenId]]) -> Result<Var> {
    let logits = model.forward_logits(g, bound, batch)?;
    let (targets, mask) = next_token_targets(batch);
    g.cross_entropy(logits, &targets, &mask)
}

/// Loss and per-parameter gradients (zeros where the loss does not depend on
/// a parameter), in canonical parameter order.
pub fn loss_and_grads(model: &ModelState, batch: &[&[TokenId]]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let loss = lm_loss(&mut g, model, &bound, batch)?;
    let value = g.value(loss).item() as f64;
    let mut grads = g.backward(loss)?;
    let out = bound
        .vars()
        .into_iter()
        .zip(model.params())
        .map(|(v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, out))
}

/// Deterministic batch order: windows are visited without replacement within
/// an epoch under a per-epoch seeded shuffle, so the batch for any step is a
/// pure function of (seed, step).
struct BatchSampler {
    n: usize,
    seed: u64,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        BatchSampler {
            n,
            seed,
            epoch: None,
            order: Vec::new(),
        }
    }

    fn index(&mut self, k: u64) -> usize {
        let epoch = k / self.n as u64;
        if self.epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.order[(k % self.n as u64) as usize]
    }

    fn batch(&mut self, step: u64, size: usize) -> Vec<usize> {
        (0..size as u64).map(|j| self.index(step * size as u64 + j)).collect()
    }
}

/// Cuts `data` into windows of exactly `context_len` tokens.
pub fn stage_windows(data: &TokenShard, context_len: usize) -> Result<TokenShard> {
    if data.window_len < context_len {
        return Err(Error::DataConfig(format!(
            "data windows of {} tokens are shorter than the stage context {context_len}",
            data.window_len
        )));
    }
    let shard = if data.window_len == context_len {
        data.clone()
    } else {
        data.rewindow(context_len)?
    };
    if shard.n_windows() == 0 {
        return Err(Error::DataConfig("no training windows".into()));
    }
    Ok(shard)
}

/// Continues training `ck` at its model's context length until the schedule
/// ends (or `opts.stop_after` updates). Returns the updated checkpoint and the
/// per-step records.
pub fn train(mut ck: Checkpoint, data: &TokenShard, opts: &mut TrainOptions) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let cfg = ck.train_config.clone();
    cfg.validate()?;
    let ctx = ck.model.config.max_seq_len;
    let shard = stage_windows(data, ctx)?;
    let mut sampler = BatchSampler::new(shard.n_windows(), cfg.seed);
    let end = match opts.stop_after {
        Some(n) => (ck.step + n).min(cfg.total_iters),
        None => cfg.total_iters,
    };
    let start = Instant::now();
    let mut records = Vec::new();
    while ck.step < end {
        let step = ck.step;
        let idx = sampler.batch(step, cfg.batch_size);
        let batch: Vec<&[TokenId]> = idx.iter().map(|&i| shard.window(i)).collect();
        let (loss, mut grads) = loss_and_grads(&ck.model, &batch).map_err(|e| match e {
            Error::Numeric(m) => Error::TrainingDiverged {
                step: step as usize,
                message: m,
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step: step as usize,
                message: format!("loss {loss}"),
            });
        }
        let grad_norm = global_norm(&grads);
        clip_global_norm(&mut grads, cfg.max_grad_norm);
        let lr = lr_at(step + 1, &cfg)?;
        adamw_step(&mut ck.model.params_mut(), &grads, &mut ck.moments, step, lr, &cfg)?;
        ck.step += 1;
        let record = StepRecord {
            step,
            lr,
            loss,
            ppl: loss.exp(),
            grad_norm,
            tokens_seen: ck.step * (cfg.batch_size * ctx) as u64,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(cb) = opts.on_step.as_mut() {
            cb(&record)?;
        }
        records.push(record);
    }
    Ok((ck, records))
}

/// Default base for a longer stage: the previous base scaled by the squared
/// length ratio, optionally clamped.
pub fn default_next_base(prev_base: f64, old_len: usize, new_len: usize, clamp: Option<(f64, f64)>) -> f64 {
    let ratio = new_len as f64 / old_len as f64;
    let base = prev_base * ratio * ratio;
    match clamp {
        Some((lo, hi)) => base.clamp(lo, hi),
        None => base,
    }
}

/// Base-frequency range used when reproducing the full-scale plan.
pub const FULL_SCALE_BASE_RANGE: (f64, f64) = (1e4, 1.5e7);

/// Starts an extension stage: same weights, new context and base, fresh
/// moments, step 0 of `train_config`.
pub fn begin_extension(
    ck: &Checkpoint,
    new_context_len: usize,
    new_rope_base: f64,
    train_config: &TrainConfig,
) -> Result<Checkpoint> {
    let old = ck.model.config.max_seq_len;
    if new_context_len <= old {
        return Err(Error::invalid_arg(format!(
            "extension to {new_context_len} tokens from a {old}-token model"
        )));
    }
    train_config.validate()?;
    let model = ck.model.with_context(new_context_len, new_rope_base)?;
    Ok(Checkpoint::from_model(model, train_config.clone(), ck.stage + 1, ck.data_seed))
}

/// Loads `ck`'s weights at a longer context and continues pretraining.
pub fn extend_context(
    ck: &Checkpoint,
    new_context_len: usize,
    new_rope_base: f64,
    train_config: &TrainConfig,
    data: &TokenShard,
    opts: &mut TrainOptions,
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    stage_windows(data, new_context_len)?;
    let next = begin_extension(ck, new_context_len, new_rope_base, train_config)?;
    train(next, data, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub context_len: usize,
    /// `None` uses [`default_next_base`] from the previous stage.
    pub rope_base: Option<f64>,
    pub train_config: TrainConfig,
}

/// Ordered context-extension stages; stage 0 trains from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub model: ModelConfig,
    pub stages: Vec<Stage>,
    /// Clamp applied to defaulted bases.
    pub base_range: Option<(f64, f64)>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid_arg("a stage plan needs at least one stage"));
        }
        for w in self.stages.windows(2) {
            if w[1].context_len <= w[0].context_len {
                return Err(Error::invalid_arg(format!(
                    "stage context lengths must increase: {} then {}",
                    w[0].context_len, w[1].context_len
                )));
            }
        }
        for s in &self.stages {
            s.train_config.validate()?;
        }
        Ok(())
    }

    /// Resolved (context_len, rope_base) per stage.
    pub fn resolved_bases(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let base = match (s.rope_base, out.last()) {
                (Some(b), _) => b,
                (None, Some(&(len, prev))) => default_next_base(prev, len, s.context_len, self.base_range),
                (None, None) => self.model.rope_base,
            };
            out.push((s.context_len, base));
        }
        out
    }

    /// Runs every stage in order; returns the checkpoint after each stage and
    /// the concatenated step records.
    pub fn run(&self, data: &TokenShard, data_seed: u64) -> Result<(Vec<Checkpoint>, Vec<StepRecord>)> {
        self.validate()?;
        let bases = self.resolved_bases();
        let mut done: Vec<Checkpoint> = Vec::new();
        let mut records = Vec::new();
        for (stage, &(len, base)) in self.stages.iter().zip(&bases) {
            let (ck, rec) = match done.last() {
                None => {
                    let mut cfg = self.model.clone();
                    cfg.max_seq_len = len;
                    cfg.rope_base = base;
                    let ck = Checkpoint::fresh(&cfg, &stage.train_config, data_seed)?;
                    train(ck, data, &mut TrainOptions::default())?
                }
                Some(prev) => extend_context(prev, len, base, &stage.train_config, data, &mut TrainOptions::default())?,
            };
            done.push(ck);
            records.extend(rec);
        }
        Ok((done, records))
    }
}

#[cfg(test)]
mod tests;
