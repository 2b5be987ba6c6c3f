//! Perplexity, reconstruction accuracy and context-length sweeps.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Tensor;
use crate::model::ModelState;
use crate::tokenizer::{TokenId, TokenSequence, TokenShard, Vocabulary};

/// Anything that maps a token sequence to next-token logits `[t x vocab]`.
pub trait LanguageModel: Sync {
    fn max_context(&self) -> usize;
    fn logits(&self, ids: &[TokenId]) -> Result<Tensor>;
}

impl LanguageModel for ModelState {
    fn max_context(&self) -> usize {
        self.config.max_seq_len
    }

    fn logits(&self, ids: &[TokenId]) -> Result<Tensor> {
        self.forward(ids)
    }
}

/// Sums over the scored positions of one sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SequenceScore {
    pub nll_sum: f64,
    pub n_scored: usize,
    pub n_correct: usize,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-position negative log-likelihoods of the scored targets, in order.
pub fn position_nlls(model: &dyn LanguageModel, ids: &[TokenId]) -> Result<Vec<(usize, f64, bool)>> {
    check_sequence(model, ids)?;
    let logits = model.logits(ids)?;
    let mut out = Vec::new();
    for i in 0..ids.len() - 1 {
        let target = ids[i + 1];
        if !Vocabulary::is_scored(target) {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let nll = max + z.ln() - row[target as usize] as f64;
        out.push((i + 1, nll, argmax(row) == target as usize));
    }
    Ok(out)
}

fn check_sequence(model: &dyn LanguageModel, ids: &[TokenId]) -> Result<()> {
    if ids.len() < 2 {
        return Err(Error::invalid_arg(format!(
            "sequences need at least 2 tokens, got {}",
            ids.len()
        )));
    }
    if ids.len() > model.max_context() {
        return Err(Error::ContextOverflow {
            len: ids.len(),
            max: model.max_context(),
        });
    }
    Ok(())
}

pub fn score_sequence(model: &dyn LanguageModel, ids: &[TokenId]) -> Result<SequenceScore> {
    let positions = position_nlls(model, ids)?;
    let nlls: Vec<f64> = positions.iter().map(|p| p.1).collect();
    Ok(SequenceScore {
        nll_sum: pairwise_sum(&nlls),
        n_scored: positions.len(),
        n_correct: positions.iter().filter(|p| p.2).count(),
    })
}

/// Pairwise (cascade) summation; fixes the reduction order independently of
/// how work was scheduled.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Aggregate of an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// `exp(mean_nll)`, pooled over all scored tokens.
    pub ppl: f64,
    pub mean_nll: f64,
    pub recon_acc: f64,
    /// Mean of per-sequence perplexities.
    pub seq_weighted_ppl: f64,
    pub n_sequences: usize,
    pub n_scored_tokens: usize,
    pub per_sequence: Vec<f64>,
}

pub fn evaluate(model: &dyn LanguageModel, sequences: &[&[TokenId]]) -> Result<EvalSummary> {
    if sequences.is_empty() {
        return Err(Error::invalid_arg("evaluation needs at least one sequence"));
    }
    let scores: Vec<SequenceScore> = sequences
        .par_iter()
        .map(|s| score_sequence(model, s))
        .collect::<Result<_>>()?;
    let n_scored: usize = scores.iter().map(|s| s.n_scored).sum();
    if n_scored == 0 {
        return Err(Error::InvalidInput("no scored positions in the evaluation set".into()));
    }
    let sums: Vec<f64> = scores.iter().map(|s| s.nll_sum).collect();
    let mean_nll = pairwise_sum(&sums) / n_scored as f64;
    let correct: usize = scores.iter().map(|s| s.n_correct).sum();
    let per_sequence: Vec<f64> = scores
        .iter()
        .map(|s| if s.n_scored == 0 { f64::NAN } else { (s.nll_sum / s.n_scored as f64).exp() })
        .collect();
    let defined: Vec<f64> = per_sequence.iter().copied().filter(|v| v.is_finite()).collect();
    Ok(EvalSummary {
        ppl: mean_nll.exp(),
        mean_nll,
        recon_acc: correct as f64 / n_scored as f64,
        seq_weighted_ppl: pairwise_sum(&defined) / defined.len().max(1) as f64,
        n_sequences: sequences.len(),
        n_scored_tokens: n_scored,
        per_sequence,
    })
}

fn as_slices(sequences: &[TokenSequence]) -> Vec<&[TokenId]> {
    sequences.iter().map(|s| s.ids.as_slice()).collect()
}

/// Token-weighted perplexity and mean NLL.
pub fn perplexity(model: &dyn LanguageModel, sequences: &[TokenSequence]) -> Result<(f64, f64)> {
    let s = evaluate(model, &as_slices(sequences))?;
    Ok((s.ppl, s.mean_nll))
}

/// Fraction of scored positions whose argmax prediction is the true token.
pub fn reconstruction_accuracy(model: &dyn LanguageModel, sequences: &[TokenSequence]) -> Result<f64> {
    Ok(evaluate(model, &as_slices(sequences))?.recon_acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub eval_length: usize,
    /// `None` when the length exceeds the model's context.
    pub ppl: Option<f64>,
    pub recon_acc: Option<f64>,
    pub mean_nll: Option<f64>,
    pub seq_weighted_ppl: Option<f64>,
    pub n_sequences: usize,
    pub n_scored_tokens: usize,
}

impl ReportRow {
    pub fn supported(&self) -> bool {
        self.ppl.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub rows: Vec<ReportRow>,
}

pub const CSV_HEADER: &str = "model_id,eval_length,ppl,recon_acc,n_sequences,n_scored_tokens";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "unsupported".to_string(), |x| x.to_string())
}

impl PerplexityReport {
    pub fn row(&self, model_id: &str, eval_length: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.model_id == model_id && r.eval_length == eval_length)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.model_id,
                r.eval_length,
                opt(r.ppl),
                opt(r.recon_acc),
                r.n_sequences,
                r.n_scored_tokens
            );
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.rows {
            let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line).map_err(|e| Error::MalformedInput {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(PerplexityReport { rows })
    }
}

/// Evaluates every model at every length. The corpus is re-windowed per
/// length (optionally capped at `max_sequences` windows); lengths beyond a
/// model's context produce unsupported rows.
pub fn length_sweep(
    models: &[(&str, &dyn LanguageModel)],
    corpus: &TokenShard,
    lengths: &[usize],
    max_sequences: Option<usize>,
) -> Result<PerplexityReport> {
    let mut rows = Vec::with_capacity(models.len() * lengths.len());
    for &(id, model) in models {
        for &len in lengths {
            if len > model.max_context() {
                rows.push(ReportRow {
                    model_id: id.to_string(),
                    eval_length: len,
                    ppl: None,
                    recon_acc: None,
                    mean_nll: None,
                    seq_weighted_ppl: None,
                    n_sequences: 0,
                    n_scored_tokens: 0,
                });
                continue;
            }
            let shard = if len == corpus.window_len {
                corpus.clone()
            } else {
                corpus.rewindow(len)?
            };
            let cap = max_sequences.unwrap_or(usize::MAX);
            let seqs: Vec<&[TokenId]> = shard.windows().take(cap).collect();
            let s = evaluate(model, &seqs)?;
            rows.push(ReportRow {
                model_id: id.to_string(),
                eval_length: len,
                ppl: Some(s.ppl),
                recon_acc: Some(s.recon_acc),
                mean_nll: Some(s.mean_nll),
                seq_weighted_ppl: Some(s.seq_weighted_ppl),
                n_sequences: s.n_sequences,
                n_scored_tokens: s.n_scored_tokens,
            });
        }
    }
    Ok(PerplexityReport { rows })
}
