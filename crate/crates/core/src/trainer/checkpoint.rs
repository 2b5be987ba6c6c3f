//! Checkpoint file: a text header followed by little-endian f32 payloads.
//!
//! ```text
//! GENELM-CHECKPOINT v1
//! model_config {json}
//! train_config {json}
//! step 120
//! stage 0
//! seed 7
//! tensors 40
//! token_embedding 6x128
//! ...
//! sha256 <hex of payload>
//! end
//! <payload: parameters, then first moments, then second moments>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AdamMoments, TrainConfig};
use crate::error::{Error, Result};
use crate::kernels::Tensor;
use crate::model::{ModelConfig, ModelState};

pub const CHECKPOINT_MAGIC: &str = "GENELM-CHECKPOINT v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub moments: AdamMoments,
    pub train_config: TrainConfig,
    /// Optimizer updates completed in the current stage.
    pub step: u64,
    pub stage: usize,
    /// Seed of the train/eval split the run was trained on.
    pub data_seed: u64,
}

impl Checkpoint {
    /// Freshly initialised model with zero moments.
    pub fn fresh(model: &ModelConfig, train: &TrainConfig, data_seed: u64) -> Result<Self> {
        train.validate()?;
        let state = ModelState::init(model, train.seed)?;
        Ok(Checkpoint::from_model(state, train.clone(), 0, data_seed))
    }

    /// Wraps trained weights with zero moments at step 0 of `stage`.
    pub fn from_model(model: ModelState, train_config: TrainConfig, stage: usize, data_seed: u64) -> Self {
        let moments = AdamMoments::zeros_like(&model.params());
        Checkpoint {
            model,
            moments,
            train_config,
            step: 0,
            stage,
            data_seed,
        }
    }

    fn tensor_list(&self) -> Vec<(String, &Tensor)> {
        let named = self.model.named_params();
        let mut out: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), *t)).collect();
        for (prefix, moments) in [("m", &self.moments.m), ("v", &self.moments.v)] {
            for ((name, _), t) in named.iter().zip(moments) {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let tensors = self.tensor_list();
        let mut payload = Vec::with_capacity(tensors.iter().map(|(_, t)| 4 * t.numel()).sum());
        for (_, t) in &tensors {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = |e: serde_json::Error| Error::Internal(format!("serialising checkpoint header: {e}"));
        let mut header = String::new();
        header.push_str(CHECKPOINT_MAGIC);
        header.push('\n');
        header.push_str(&format!("model_config {}\n", serde_json::to_string(&self.model.config).map_err(json)?));
        header.push_str(&format!("train_config {}\n", serde_json::to_string(&self.train_config).map_err(json)?));
        header.push_str(&format!("step {}\nstage {}\nseed {}\n", self.step, self.stage, self.data_seed));
        header.push_str(&format!("tensors {}\n", tensors.len()));
        for (name, t) in &tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("{name} {}\n", dims.join("x")));
        }
        header.push_str(&format!("sha256 {}\nend\n", hex(&Sha256::digest(&payload))));
        out.write_all(header.as_bytes())?;
        out.write_all(&payload)?;
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Checkpoint> {
        read_checkpoint(input, None)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::read_from(BufReader::new(File::open(path)?))
    }

    /// Loads a checkpoint and requires its tensors to fit `config`; a mismatch
    /// is a shape error naming the first offending tensor.
    pub fn load_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Checkpoint> {
        read_checkpoint(BufReader::new(File::open(path)?), Some(config))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(msg.into())
}

struct HeaderReader<R> {
    input: R,
    line: usize,
}

impl<R: BufRead> HeaderReader<R> {
    fn next(&mut self) -> Result<String> {
        let mut s = String::new();
        let n = self.input.read_line(&mut s)?;
        self.line += 1;
        if n == 0 || !s.ends_with('\n') {
            return Err(format_err(format!("header truncated at line {}", self.line)));
        }
        s.pop();
        Ok(s)
    }

    fn field(&mut self, key: &str) -> Result<String> {
        let line = self.next()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(format_err(format!("line {}: expected `{key}`, found `{line}`", self.line))),
        }
    }

    fn number<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.field(key)?;
        v.parse()
            .map_err(|_| format_err(format!("line {}: bad {key} value `{v}`", self.line)))
    }
}

fn read_checkpoint<R: BufRead>(input: R, expect: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut h = HeaderReader { input, line: 0 };
    let magic = h.next()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(format_err(format!(
            "unsupported checkpoint version `{magic}`, expected `{CHECKPOINT_MAGIC}`"
        )));
    }
    let model_config: ModelConfig = serde_json::from_str(&h.field("model_config")?)
        .map_err(|e| format_err(format!("model_config: {e}")))?;
    let train_config: TrainConfig = serde_json::from_str(&h.field("train_config")?)
        .map_err(|e| format_err(format!("train_config: {e}")))?;
    let step: u64 = h.number("step")?;
    let stage: usize = h.number("stage")?;
    let data_seed: u64 = h.number("seed")?;
    let n: usize = h.number("tensors")?;
    let mut declared = Vec::with_capacity(n);
    for _ in 0..n {
        let line = h.next()?;
        let (name, dims) = line
            .split_once(' ')
            .ok_or_else(|| format_err(format!("line {}: bad tensor entry `{line}`", h.line)))?;
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| format_err(format!("line {}: bad shape `{dims}`", h.line)))?;
        declared.push((name.to_string(), shape));
    }
    let digest = h.field("sha256")?;
    if h.next()? != "end" {
        return Err(format_err("missing header terminator"));
    }

    let expected = ModelState::expected_shapes(&model_config);
    if let Some(target) = expect {
        let wanted = ModelState::expected_shapes(target);
        for ((name, have), (_, want)) in expected.iter().zip(&wanted) {
            if have != want {
                return Err(Error::shape(format!(
                    "tensor {name} is {have:?} in the checkpoint but {want:?} in the requested config"
                )));
            }
        }
        if expected.len() != wanted.len() {
            return Err(Error::shape(format!(
                "checkpoint holds {} parameter tensors, requested config needs {}",
                expected.len(),
                wanted.len()
            )));
        }
    }
    let mut full = expected.clone();
    for prefix in ["m", "v"] {
        full.extend(expected.iter().map(|(name, s)| (format!("{prefix}.{name}"), s.clone())));
    }
    if declared.len() != full.len() {
        return Err(format_err(format!(
            "header lists {} tensors, model_config implies {}",
            declared.len(),
            full.len()
        )));
    }
    for ((dn, ds), (en, es)) in declared.iter().zip(&full) {
        if dn != en || ds != es {
            return Err(format_err(format!(
                "header tensor {dn} {ds:?} disagrees with model_config ({en} {es:?})"
            )));
        }
    }

    let mut input = h.input;
    let total: usize = full.iter().map(|(_, s)| 4 * s.iter().product::<usize>()).sum();
    let mut payload = Vec::with_capacity(total);
    input.read_to_end(&mut payload)?;
    if payload.len() != total {
        return Err(format_err(format!(
            "payload has {} bytes, header declares {total}",
            payload.len()
        )));
    }
    if hex(&Sha256::digest(&payload)) != digest {
        return Err(format_err("payload checksum mismatch"));
    }

    let mut tensors = Vec::with_capacity(full.len());
    let mut offset = 0;
    for (_, shape) in &full {
        let count: usize = shape.iter().product();
        let data = payload[offset..offset + 4 * count]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += 4 * count;
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    let k = expected.len();
    let v = tensors.split_off(2 * k);
    let m = tensors.split_off(k);
    let model = ModelState::from_tensors(&model_config, tensors)?;
    Ok(Checkpoint {
        model,
        moments: AdamMoments { m, v },
        train_config,
        step,
        stage,
        data_seed,
    })
}
