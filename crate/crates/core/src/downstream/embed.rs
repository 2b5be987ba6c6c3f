use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Tensor;
use crate::model::{HiddenLayer, ModelState};
use crate::tokenizer::{encode, TokenId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EmbedOptions {
    pub pooling: Pooling,
    /// Which activations are pooled; the final-norm output by default.
    pub layer: HiddenLayer,
}

/// Source of per-token hidden states.
pub trait Encoder: Sync {
    fn max_context(&self) -> usize;
    fn hidden(&self, ids: &[TokenId], layer: HiddenLayer) -> Result<Tensor>;
}

impl Encoder for ModelState {
    fn max_context(&self) -> usize {
        self.config.max_seq_len
    }

    fn hidden(&self, ids: &[TokenId], layer: HiddenLayer) -> Result<Tensor> {
        self.hidden_states(ids, layer)
    }
}

/// Pools `[t x hidden]` over the token dimension.
pub fn pool(hidden: &Tensor, pooling: Pooling) -> Vec<f32> {
    let c = hidden.cols();
    let rows = hidden.rows();
    match pooling {
        Pooling::Max => {
            let mut out = vec![f32::NEG_INFINITY; c];
            for r in 0..rows {
                for (o, &v) in out.iter_mut().zip(hidden.row(r)) {
                    *o = o.max(v);
                }
            }
            out
        }
        Pooling::Mean => {
            let mut acc = vec![0f64; c];
            for r in 0..rows {
                for (a, &v) in acc.iter_mut().zip(hidden.row(r)) {
                    *a += v as f64;
                }
            }
            acc.iter().map(|a| (a / rows as f64) as f32).collect()
        }
    }
}

/// Element-wise mean of chunk vectors; a single chunk is returned unchanged.
pub fn average_chunks(chunks: &[Vec<f32>]) -> Vec<f32> {
    if chunks.len() == 1 {
        return chunks[0].clone();
    }
    let mut acc = vec![0f64; chunks[0].len()];
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v as f64;
        }
    }
    acc.iter().map(|a| (a / chunks.len() as f64) as f32).collect()
}

/// Embeds token ids: context-length chunks (the last one may be shorter) are
/// pooled independently and averaged. Returns the vector and the chunk count.
pub fn embed_tokens(model: &dyn Encoder, ids: &[TokenId], opts: EmbedOptions) -> Result<(Vec<f32>, usize)> {
    if ids.is_empty() {
        return Err(Error::invalid_arg("cannot embed an empty sequence"));
    }
    let chunks = ids
        .chunks(model.max_context())
        .map(|c| Ok(pool(&model.hidden(c, opts.layer)?, opts.pooling)))
        .collect::<Result<Vec<_>>>()?;
    Ok((average_chunks(&chunks), chunks.len()))
}

pub fn embed_sequence(model: &dyn Encoder, sequence: &str, opts: EmbedOptions) -> Result<Vec<f32>> {
    let ids = encode(sequence)?.ids;
    Ok(embed_tokens(model, &ids, opts)?.0)
}

/// One embedding row per input sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub rows: Vec<Vec<f32>>,
    pub pooling: Pooling,
    /// Number of context chunks each row averaged.
    pub n_chunks: Vec<usize>,
}

impl EmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Tab-separated values, one row per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }
}

pub fn embed_all(model: &dyn Encoder, sequences: &[&str], opts: EmbedOptions) -> Result<EmbeddingMatrix> {
    let results = sequences
        .par_iter()
        .map(|s| embed_tokens(model, &encode(s)?.ids, opts))
        .collect::<Result<Vec<_>>>()?;
    if results.iter().any(|(v, _)| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Numeric("non-finite value in an embedding".into()));
    }
    let (rows, n_chunks) = results.into_iter().unzip();
    Ok(EmbeddingMatrix {
        rows,
        pooling: opts.pooling,
        n_chunks,
    })
}
