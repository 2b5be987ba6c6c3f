//! Decoder-only language model: token embedding, pre-norm attention and
//! SwiGLU blocks with rotary positions, final RMSNorm, LM head.

mod config;
mod rope;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use rope::{rope_angles, rope_frequencies, RopeAngles};

use crate::error::{Error, Result};
use crate::kernels::{AttentionLayout, Graph, Tensor, Var};
use crate::tokenizer::TokenId;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm_gain: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm_gain: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

const LAYER_TENSORS: [&str; 9] = [
    "attn_norm_gain",
    "wq",
    "wk",
    "wv",
    "wo",
    "ffn_norm_gain",
    "w1",
    "w2",
    "w3",
];

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm_gain,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm_gain,
            &self.w1,
            &self.w2,
            &self.w3,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm_gain,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm_gain,
            &mut self.w1,
            &mut self.w2,
            &mut self.w3,
        ]
    }
}

/// Learnable parameters. Linear maps act on row vectors (`x W`) and carry no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm_gain: Tensor,
    /// Absent when embeddings are tied.
    pub lm_head: Option<Tensor>,
}

/// Which activations [`ModelState::hidden_states`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HiddenLayer {
    Embedding,
    /// Residual stream after block `i` (0-based).
    Block(usize),
    #[default]
    FinalNorm,
}

/// The model's parameters as leaves of one graph.
pub struct BoundModel {
    pub token_embedding: Var,
    pub layers: Vec<[Var; 9]>,
    pub final_norm_gain: Var,
    pub lm_head: Option<Var>,
}

impl BoundModel {
    /// All parameter handles in canonical order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.token_embedding];
        for l in &self.layers {
            v.extend_from_slice(l);
        }
        v.push(self.final_norm_gain);
        v.extend(self.lm_head);
        v
    }
}

impl ModelState {
    /// Gaussian init (std `config.init_std`) for embeddings and projections,
    /// gains at 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, h, f) = (config.vocab_size, config.hidden, config.ffn_dim);
        let std = config.init_std;
        let token_embedding = Tensor::randn(&[v, h], std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm_gain: Tensor::full(&[h], 1.0),
                wq: Tensor::randn(&[h, h], std, &mut rng),
                wk: Tensor::randn(&[h, h], std, &mut rng),
                wv: Tensor::randn(&[h, h], std, &mut rng),
                wo: Tensor::randn(&[h, h], std, &mut rng),
                ffn_norm_gain: Tensor::full(&[h], 1.0),
                w1: Tensor::randn(&[h, f], std, &mut rng),
                w2: Tensor::randn(&[f, h], std, &mut rng),
                w3: Tensor::randn(&[h, f], std, &mut rng),
            })
            .collect();
        let final_norm_gain = Tensor::full(&[h], 1.0);
        let lm_head = (!config.tie_embeddings).then(|| Tensor::randn(&[h, v], std, &mut rng));
        Ok(ModelState {
            config: config.clone(),
            token_embedding,
            layers,
            final_norm_gain,
            lm_head,
        })
    }

    /// Expected shape of every parameter, by canonical name.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (v, h, f) = (config.vocab_size, config.hidden, config.ffn_dim);
        let mut out = vec![("token_embedding".to_string(), vec![v, h])];
        for i in 0..config.n_layers {
            let shapes = [vec![h], vec![h, h], vec![h, h], vec![h, h], vec![h, h], vec![h], vec![h, f], vec![f, h], vec![h, f]];
            for (name, shape) in LAYER_TENSORS.iter().zip(shapes) {
                out.push((format!("layers.{i}.{name}"), shape));
            }
        }
        out.push(("final_norm_gain".to_string(), vec![h]));
        if !config.tie_embeddings {
            out.push(("lm_head".to_string(), vec![h, v]));
        }
        out
    }

    /// Parameters with canonical names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm_gain".to_string(), &self.final_norm_gain));
        if let Some(head) = &self.lm_head {
            out.push(("lm_head".to_string(), head));
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm_gain);
        if let Some(head) = &mut self.lm_head {
            out.push(head);
        }
        out
    }

    /// Rebuilds a state from tensors in canonical order, checking every shape.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = ModelState::expected_shapes(config);
        if tensors.len() != expected.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "tensor {name} has shape {:?}, config requires {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("counted above");
        let token_embedding = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm_gain: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm_gain: next(),
                w1: next(),
                w2: next(),
                w3: next(),
            })
            .collect();
        let final_norm_gain = next();
        let lm_head = (!config.tie_embeddings).then(&mut next);
        Ok(ModelState {
            config: config.clone(),
            token_embedding,
            layers,
            final_norm_gain,
            lm_head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Binds every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let token_embedding = g.leaf(self.token_embedding.clone(), trainable);
        let layers = self
            .layers
            .iter()
            .map(|l| l.tensors().map(|t| g.leaf(t.clone(), trainable)))
            .collect();
        let final_norm_gain = g.leaf(self.final_norm_gain.clone(), trainable);
        let lm_head = self.lm_head.as_ref().map(|t| g.leaf(t.clone(), trainable));
        BoundModel {
            token_embedding,
            layers,
            final_norm_gain,
            lm_head,
        }
    }

    fn check_batch(&self, batch: &[&[TokenId]]) -> Result<usize> {
        let t = batch.first().map_or(0, |s| s.len());
        if batch.is_empty() || t == 0 {
            return Err(Error::invalid_arg("forward needs at least one non-empty sequence"));
        }
        if batch.iter().any(|s| s.len() != t) {
            return Err(Error::shape("sequences in a batch must share one length"));
        }
        if t > self.config.max_seq_len {
            return Err(Error::ContextOverflow {
                len: t,
                max: self.config.max_seq_len,
            });
        }
        let vocab = self.config.vocab_size;
        if let Some(&bad) = batch.iter().flat_map(|s| s.iter()).find(|&&id| id as usize >= vocab) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        Ok(t)
    }

    /// Runs the stack up to `stop` and returns `[n_seq * t x hidden]`.
    pub fn forward_hidden(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        batch: &[&[TokenId]],
        stop: HiddenLayer,
    ) -> Result<Var> {
        let t = self.check_batch(batch)?;
        let cfg = &self.config;
        let ids: Vec<u32> = batch.iter().flat_map(|s| s.iter().map(|&id| id as u32)).collect();
        let mut x = g.embedding(bound.token_embedding, &ids)?;
        if stop == HiddenLayer::Embedding {
            return Ok(x);
        }
        let angles = RopeAngles::for_length(cfg.head_dim(), cfg.rope_base, t)?;
        let layout = AttentionLayout {
            n_seq: batch.len(),
            seq_len: t,
            n_heads: cfg.n_heads,
        };
        for (i, layer) in bound.layers.iter().enumerate() {
            x = attention_block(g, x, layer, &angles, layout, cfg.norm_eps)?;
            x = ffn_block(g, x, layer, cfg.norm_eps)?;
            if stop == HiddenLayer::Block(i) {
                return Ok(x);
            }
        }
        if let HiddenLayer::Block(i) = stop {
            return Err(Error::invalid_arg(format!(
                "block {i} requested from a {}-layer model",
                cfg.n_layers
            )));
        }
        g.rmsnorm(x, bound.final_norm_gain, cfg.norm_eps)
    }

    /// Next-token logits `[n_seq * t x vocab]`; row `i` of a sequence scores token `i + 1`.
    pub fn forward_logits(&self, g: &mut Graph, bound: &BoundModel, batch: &[&[TokenId]]) -> Result<Var> {
        let h = self.forward_hidden(g, bound, batch, HiddenLayer::FinalNorm)?;
        match bound.lm_head {
            Some(head) => g.matmul(h, head),
            None => g.matmul_nt(h, bound.token_embedding),
        }
    }

    /// Inference-only logits for one sequence.
    pub fn forward(&self, ids: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = self.forward_logits(&mut g, &bound, &[ids])?;
        Ok(g.value(out).clone())
    }

    /// Inference-only hidden states `[t x hidden]` for one sequence.
    pub fn hidden_states(&self, ids: &[TokenId], layer: HiddenLayer) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = self.forward_hidden(&mut g, &bound, &[ids], layer)?;
        Ok(g.value(out).clone())
    }

    /// Same weights under a different context length and rotary base.
    pub fn with_context(&self, max_seq_len: usize, rope_base: f64) -> Result<ModelState> {
        let mut next = self.clone();
        next.config.max_seq_len = max_seq_len;
        next.config.rope_base = rope_base;
        next.config.validate()?;
        Ok(next)
    }
}

/// Indices into a bound layer's parameter array.
mod slot {
    pub const ATTN_NORM: usize = 0;
    pub const WQ: usize = 1;
    pub const WK: usize = 2;
    pub const WV: usize = 3;
    pub const WO: usize = 4;
    pub const FFN_NORM: usize = 5;
    pub const W1: usize = 6;
    pub const W2: usize = 7;
    pub const W3: usize = 8;
}

/// `x + MHA(rmsnorm(x)) Wo` with rotary q/k and a strict causal mask.
pub fn attention_block(
    g: &mut Graph,
    x: Var,
    layer: &[Var; 9],
    angles: &RopeAngles,
    layout: AttentionLayout,
    eps: f32,
) -> Result<Var> {
    if angles.n_positions() < layout.seq_len {
        return Err(Error::ContextOverflow {
            len: layout.seq_len,
            max: angles.n_positions(),
        });
    }
    let n = g.rmsnorm(x, layer[slot::ATTN_NORM], eps)?;
    let q = g.matmul(n, layer[slot::WQ])?;
    let k = g.matmul(n, layer[slot::WK])?;
    let v = g.matmul(n, layer[slot::WV])?;
    let table = angles.prefix(layout.seq_len).table();
    let q = g.rotate_pairs(q, table.clone())?;
    let k = g.rotate_pairs(k, table)?;
    let a = g.causal_attention(q, k, v, layout)?;
    let o = g.matmul(a, layer[slot::WO])?;
    g.add(x, o)
}

/// `x + (silu(n W1) * (n W3)) W2` with `n = rmsnorm(x)`.
pub fn ffn_block(g: &mut Graph, x: Var, layer: &[Var; 9], eps: f32) -> Result<Var> {
    let n = g.rmsnorm(x, layer[slot::FFN_NORM], eps)?;
    let gate = g.matmul(n, layer[slot::W1])?;
    let gate = g.silu(gate);
    let up = g.matmul(n, layer[slot::W3])?;
    let hidden = g.mul(gate, up)?;
    let down = g.matmul(hidden, layer[slot::W2])?;
    g.add(x, down)
}

#[cfg(test)]
mod tests;
