use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, TaskKind, Target};
use super::metrics::{self, Averaging};
use crate::error::{Error, Result};
use crate::kernels::{Graph, Tensor, Var};
use crate::model::{HiddenLayer, ModelState};
use crate::tokenizer::{encode, TokenId};
use crate::trainer::{adamw_step, clip_global_norm, lr_at, AdamMoments, Checkpoint, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    AllLayers,
    HeadOnly,
}

impl FinetuneMode {
    pub fn name(&self) -> &'static str {
        match self {
            FinetuneMode::AllLayers => "all_layers",
            FinetuneMode::HeadOnly => "head_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Optimizer and schedule; `total_iters` and `warmup_iters` are derived
    /// from `epochs` and `warmup_ratio`.
    pub optimizer: TrainConfig,
    pub epochs: usize,
    pub warmup_ratio: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            optimizer: TrainConfig::finetune(0),
            epochs: 3,
            warmup_ratio: 0.1,
        }
    }
}

impl FinetuneConfig {
    /// lr 1e-5 with cosine decay.
    pub fn species() -> Self {
        FinetuneConfig {
            optimizer: TrainConfig::finetune_species(0),
            ..FinetuneConfig::default()
        }
    }

    pub fn schedule(&self, n_train: usize) -> TrainConfig {
        let per_epoch = n_train.div_ceil(self.optimizer.batch_size.max(1)) as u64;
        let total = per_epoch * self.epochs as u64;
        TrainConfig {
            total_iters: total,
            warmup_iters: ((total as f64 * self.warmup_ratio).round() as u64).min(total),
            ..self.optimizer.clone()
        }
    }
}

/// Linear layer over the mean-pooled final hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub backbone: ModelState,
    pub head: ClassificationHead,
    pub task: TaskKind,
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    task: TaskKind,
    hidden: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Classifier {
    pub fn new(backbone: ModelState, task: TaskKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = backbone.config.hidden;
        let k = task.n_outputs();
        let head = ClassificationHead {
            weight: Tensor::randn(&[h, k], backbone.config.init_std, &mut rng),
            bias: Tensor::zeros(&[k]),
        };
        Classifier { backbone, head, task }
    }

    /// Head logits for one token sequence (truncated to the context).
    fn logits_var(&self, g: &mut Graph, backbone: &crate::model::BoundModel, w: Var, b: Var, ids: &[TokenId]) -> Result<Var> {
        let h = self.backbone.forward_hidden(g, backbone, &[ids], HiddenLayer::FinalNorm)?;
        let pooled = g.mean_pool_rows(h, ids.len())?;
        let z = g.matmul(pooled, w)?;
        g.add_bias(z, b)
    }

    /// Class probabilities (softmax) or per-label probabilities (sigmoid).
    pub fn scores(&self, sequence: &str) -> Result<Vec<f64>> {
        let ids = truncate(encode(sequence)?.ids, self.backbone.config.max_seq_len).0;
        let mut g = Graph::new();
        let bound = self.backbone.bind(&mut g, false);
        let w = g.constant(self.head.weight.clone());
        let b = g.constant(self.head.bias.clone());
        let z = self.logits_var(&mut g, &bound, w, b, &ids)?;
        let z: Vec<f64> = g.value(z).data().iter().map(|&v| v as f64).collect();
        Ok(match self.task {
            TaskKind::Multilabel(_) => z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            _ => {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            }
        })
    }

    /// Writes `backbone.ckpt` and `head.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        Checkpoint::from_model(self.backbone.clone(), TrainConfig::finetune(0), 0, 0).save(dir.join("backbone.ckpt"))?;
        let head = HeadFile {
            task: self.task,
            hidden: self.head.weight.rows(),
            weight: self.head.weight.data().to_vec(),
            bias: self.head.bias.data().to_vec(),
        };
        let json = serde_json::to_string(&head).map_err(|e| Error::Internal(e.to_string()))?;
        fs::write(dir.join("head.json"), json)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let backbone = Checkpoint::load(dir.join("backbone.ckpt"))?.model;
        let text = fs::read_to_string(dir.join("head.json"))?;
        let file: HeadFile = serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("head.json: {e}")))?;
        let k = file.task.n_outputs();
        if file.hidden != backbone.config.hidden {
            return Err(Error::shape(format!(
                "head expects hidden size {}, backbone has {}",
                file.hidden, backbone.config.hidden
            )));
        }
        let head = ClassificationHead {
            weight: Tensor::new(vec![file.hidden, k], file.weight)?,
            bias: Tensor::new(vec![k], file.bias)?,
        };
        Ok(Classifier {
            backbone,
            head,
            task: file.task,
        })
    }
}

/// Keeps the leading `max` tokens; reports whether anything was cut.
fn truncate(mut ids: Vec<TokenId>, max: usize) -> (Vec<TokenId>, bool) {
    let cut = ids.len() > max;
    ids.truncate(max);
    (ids, cut)
}

/// The JSON record written after finetuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: String,
    pub mode: String,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub mcc: Option<f64>,
    pub auc_roc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub median_auc: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub steps: u64,
}

pub struct FinetuneOutcome {
    pub classifier: Classifier,
    pub metrics: MetricsRecord,
    pub losses: Vec<f64>,
    /// Human-readable notes such as truncated sequences.
    pub warnings: Vec<String>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Average precision of every label with both outcomes present.
fn per_label_ap(scores: &[Vec<f64>], flags: &[Vec<bool>], k: usize) -> Vec<f64> {
    (0..k)
        .filter_map(|j| {
            let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
            let t: Vec<bool> = flags.iter().map(|r| r[j]).collect();
            metrics::auc_pr(&s, &t)
        })
        .collect()
}

/// Scores `test` with `clf`; metrics follow the task kind.
pub fn evaluate_classifier(clf: &Classifier, test: &LabeledDataset, mode: &str, n_train: usize, steps: u64) -> Result<MetricsRecord> {
    if test.is_empty() {
        return Err(Error::invalid_arg("empty test split"));
    }
    let scores: Vec<Vec<f64>> = test.items.iter().map(|i| clf.scores(&i.sequence)).collect::<Result<_>>()?;
    let mut rec = MetricsRecord {
        task: clf.task.name().to_string(),
        mode: mode.to_string(),
        accuracy: None,
        precision: None,
        recall: None,
        f1: None,
        mcc: None,
        auc_roc: None,
        auc_pr: None,
        median_auc: None,
        n_train,
        n_test: test.len(),
        steps,
    };
    match clf.task {
        TaskKind::Binary | TaskKind::Multiclass(_) => {
            let targets = test.classes().expect("single-label task");
            let preds: Vec<usize> = scores
                .iter()
                .map(|s| (0..s.len()).fold(0, |b, c| if s[c] > s[b] { c } else { b }))
                .collect();
            let avg = if clf.task == TaskKind::Binary { Averaging::Binary } else { Averaging::Macro };
            rec.accuracy = metrics::accuracy(&preds, &targets);
            rec.precision = metrics::precision(&preds, &targets, avg);
            rec.recall = metrics::recall(&preds, &targets, avg);
            rec.f1 = metrics::f1(&preds, &targets, avg);
            rec.mcc = metrics::mcc(&preds, &targets);
            let k = clf.task.n_outputs();
            let flags: Vec<Vec<bool>> = targets.iter().map(|&t| (0..k).map(|c| c == t).collect()).collect();
            if clf.task == TaskKind::Binary {
                let s1: Vec<f64> = scores.iter().map(|s| s[1]).collect();
                let t1: Vec<bool> = flags.iter().map(|f| f[1]).collect();
                rec.auc_roc = metrics::auc_roc(&s1, &t1);
                rec.auc_pr = metrics::auc_pr(&s1, &t1);
            } else {
                let aucs: Vec<f64> = metrics::per_label_auc(&scores, &flags).into_iter().flatten().collect();
                rec.auc_roc = mean(&aucs);
                rec.auc_pr = mean(&per_label_ap(&scores, &flags, k));
                rec.median_auc = metrics::median(&mut aucs.clone());
            }
        }
        TaskKind::Multilabel(k) => {
            let flags: Vec<Vec<bool>> = test
                .items
                .iter()
                .map(|i| match &i.target {
                    Target::Flags(f) => f.clone(),
                    Target::Class(_) => vec![false; k],
                })
                .collect();
            let pred_flags: Vec<bool> = scores.iter().flat_map(|s| s.iter().map(|&p| p > 0.5)).collect();
            let true_flags: Vec<bool> = flags.iter().flatten().copied().collect();
            let counts = metrics::BinaryCounts::from_flags(&pred_flags, &true_flags);
            rec.accuracy = Some((counts.tp + counts.tn) as f64 / true_flags.len() as f64);
            rec.precision = counts.precision();
            rec.recall = counts.recall();
            rec.f1 = counts.f1();
            let p: Vec<usize> = pred_flags.iter().map(|&b| b as usize).collect();
            let t: Vec<usize> = true_flags.iter().map(|&b| b as usize).collect();
            rec.mcc = metrics::mcc(&p, &t);
            let aucs: Vec<f64> = metrics::per_label_auc(&scores, &flags).into_iter().flatten().collect();
            rec.auc_roc = mean(&aucs);
            rec.auc_pr = mean(&per_label_ap(&scores, &flags, k));
            rec.median_auc = metrics::median_auc_per_label(&scores, &flags);
        }
    }
    Ok(rec)
}

/// Attaches a fresh head to `model` and trains on `train`. In head-only mode
/// the backbone is bound as constants and never updated.
pub fn finetune_classify(
    model: &ModelState,
    train: &LabeledDataset,
    test: &LabeledDataset,
    mode: FinetuneMode,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid_arg("finetuning needs non-empty train and test splits"));
    }
    if train.task != test.task {
        return Err(Error::invalid_arg(format!("train task {} vs test task {}", train.task, test.task)));
    }
    let schedule = cfg.schedule(train.len());
    schedule.validate()?;
    let ctx = model.config.max_seq_len;
    let mut warnings = Vec::new();
    let mut inputs = Vec::with_capacity(train.len());
    for (i, item) in train.items.iter().enumerate() {
        let (ids, cut) = truncate(encode(&item.sequence)?.ids, ctx);
        if cut {
            warnings.push(format!("train item {i}: {} bp truncated to {ctx}", item.sequence.len()));
        }
        inputs.push(ids);
    }
    let cut_test = test.items.iter().filter(|i| i.sequence.len() > ctx).count();
    if cut_test > 0 {
        warnings.push(format!("{cut_test} test sequences truncated to {ctx}"));
    }

    let mut clf = Classifier::new(model.clone(), train.task, schedule.seed);
    let train_backbone = mode == FinetuneMode::AllLayers;
    let mut moments = {
        let mut p: Vec<&Tensor> = if train_backbone { clf.backbone.params() } else { Vec::new() };
        p.push(&clf.head.weight);
        p.push(&clf.head.bias);
        AdamMoments::zeros_like(&p)
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let bs = schedule.batch_size;
    let mut losses = Vec::new();
    let mut step = 0u64;
    while step < schedule.total_iters {
        order.shuffle(&mut rng);
        for batch in order.chunks(bs) {
            if step >= schedule.total_iters {
                break;
            }
            let mut g = Graph::new();
            let bound = clf.backbone.bind(&mut g, train_backbone);
            let w = g.param(clf.head.weight.clone());
            let b = g.param(clf.head.bias.clone());
            let mut total: Option<Var> = None;
            for &i in batch {
                let z = clf.logits_var(&mut g, &bound, w, b, &inputs[i])?;
                let loss = match &train.items[i].target {
                    Target::Class(c) => g.cross_entropy(z, &[*c as u32], &[true])?,
                    Target::Flags(f) => {
                        let t = Tensor::new(vec![1, f.len()], f.iter().map(|&x| x as u8 as f32).collect())?;
                        g.bce_with_logits(z, &t)?
                    }
                };
                total = Some(match total {
                    Some(acc) => g.add(acc, loss)?,
                    None => loss,
                });
            }
            let total = total.expect("non-empty batch");
            let loss = g.scale(total, 1.0 / batch.len() as f32);
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: step as usize,
                    message: format!("finetuning loss {value}"),
                });
            }
            let mut grads = g.backward(loss)?;
            let mut vars: Vec<Var> = if train_backbone { bound.vars() } else { Vec::new() };
            vars.extend([w, b]);
            let mut params: Vec<&mut Tensor> = if train_backbone { clf.backbone.params_mut() } else { Vec::new() };
            params.push(&mut clf.head.weight);
            params.push(&mut clf.head.bias);
            let mut gs: Vec<Tensor> = vars
                .iter()
                .zip(params.iter())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            clip_global_norm(&mut gs, schedule.max_grad_norm);
            let lr = lr_at(step + 1, &schedule)?;
            adamw_step(&mut params, &gs, &mut moments, step, lr, &schedule)?;
            losses.push(value);
            step += 1;
        }
    }
    let metrics = evaluate_classifier(&clf, test, mode.name(), train.len(), step)?;
    Ok(FinetuneOutcome {
        classifier: clf,
        metrics,
        losses,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downstream::dataset::LabeledItem;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn toy_task(rng: &mut ChaCha8Rng, n: usize) -> LabeledDataset {
        // class 1 sequences are A-rich, class 0 are C-rich
        let items = (0..n)
            .map(|i| {
                let c = i % 2;
                let rich = if c == 1 { 'A' } else { 'C' };
                let sequence: String = (0..24)
                    .map(|_| if rng.random_bool(0.6) { rich } else { ['G', 'T'][rng.random_range(0..2)] })
                    .collect();
                LabeledItem { sequence, target: Target::Class(c) }
            })
            .collect();
        LabeledDataset::new(TaskKind::Binary, items).unwrap()
    }

    fn backbone() -> ModelState {
        ModelState::init(&ModelConfig::tiny(16, 1, 2, 16), 5).unwrap()
    }

    fn quick(lr: f64) -> FinetuneConfig {
        FinetuneConfig {
            optimizer: TrainConfig {
                lr_peak: lr,
                batch_size: 8,
                ..TrainConfig::finetune(0)
            },
            epochs: 6,
            warmup_ratio: 0.1,
        }
    }

    #[test]
    fn head_only_leaves_backbone_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train, test) = (toy_task(&mut rng, 40), toy_task(&mut rng, 20));
        let m = backbone();
        let out = finetune_classify(&m, &train, &test, FinetuneMode::HeadOnly, &quick(1e-2)).unwrap();
        assert_eq!(out.classifier.backbone, m);
        assert_ne!(out.classifier.head.weight, Classifier::new(m.clone(), train.task, 0).head.weight);
        // sequences of 24 bp exceed the 16-token context
        assert!(!out.warnings.is_empty());
        assert_eq!(out.metrics.steps, 30);
    }

    #[test]
    fn all_layers_learns_the_toy_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (train, test) = (toy_task(&mut rng, 64), toy_task(&mut rng, 40));
        let m = backbone();
        let out = finetune_classify(&m, &train, &test, FinetuneMode::AllLayers, &quick(3e-3)).unwrap();
        assert_ne!(out.classifier.backbone, m);
        assert!(out.metrics.accuracy.unwrap() > 0.8, "{:?}", out.metrics);
        assert!(out.metrics.auc_roc.is_some() && out.metrics.mcc.is_some());
        let first: f64 = out.losses[..5].iter().sum::<f64>();
        let last: f64 = out.losses[out.losses.len() - 5..].iter().sum::<f64>();
        assert!(last < first);
    }

    #[test]
    fn classifier_round_trips_through_files() {
        let clf = Classifier::new(backbone(), TaskKind::Multilabel(3), 4);
        let dir = tempfile::tempdir().unwrap();
        clf.save(dir.path()).unwrap();
        assert_eq!(Classifier::load(dir.path()).unwrap(), clf);
        let s = clf.scores("ACGTTT").unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn schedule_derivation() {
        let cfg = FinetuneConfig::default();
        let s = cfg.schedule(100);
        assert_eq!(s.total_iters, 3 * 13);
        assert_eq!(s.warmup_iters, 4);
        assert_eq!(s.lr_peak, 1e-4);
        let sp = FinetuneConfig::species().schedule(100);
        assert_eq!(sp.lr_peak, 1e-5);
    }

    #[test]
    fn empty_split_rejected() {
        let empty = LabeledDataset::new(TaskKind::Binary, Vec::new()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let some = toy_task(&mut rng, 4);
        assert!(matches!(
            finetune_classify(&backbone(), &some, &empty, FinetuneMode::HeadOnly, &quick(1e-3)),
            Err(Error::InvalidArgument(_))
        ));
    }
}
