use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::*;
use crate::downstream::{
    embed_all, finetune_classify, train_probe, EmbedOptions, FinetuneConfig, FinetuneMode, LabeledDataset, Pooling,
    ProbeConfig,
};
use crate::evaluator::{length_sweep, LanguageModel};
use crate::genome_io::{
    extract_windows, generate_with_chain, read_fasta_file, split_by_record, split_train_eval, stats_report,
    FastaRecord, RepeatPlan,
};
use crate::model::{HiddenLayer, ModelConfig};
use crate::tokenizer::{TokenShard, VOCAB_SIZE};
use crate::trainer::{
    default_next_base, extend_context, train, Checkpoint, DecayKind, MetricsLog, StepRecord, TrainConfig,
    TrainOptions,
};

pub(super) fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Prepare(a) => prepare(a, out),
        Command::Train(a) => train_cmd(a, out, err),
        Command::Extend(a) => extend_cmd(a, out, err),
        Command::EvalPpl(a) => eval_ppl(a, out),
        Command::Sweep(a) => sweep(a, out),
        Command::Embed(a) => embed(a, out),
        Command::Probe(a) => probe(a, out),
        Command::Finetune(a) => finetune(a, out, err),
    }
}

/// Prefixes I/O failures with the offending path.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!("{}: {io}", path.display())),
        other => other,
    })
}

/// Integers written as `1000000`, `1e6` or `10^6`.
pub fn parse_count(text: &str) -> Result<usize> {
    let bad = || Error::invalid_arg(format!("`{text}` is not a count"));
    if let Some((b, e)) = text.split_once('^') {
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        let e: u32 = e.trim().parse().map_err(|_| bad())?;
        return b.checked_pow(e).ok_or_else(bad);
    }
    if let Ok(n) = text.parse::<usize>() {
        return Ok(n);
    }
    let f: f64 = text.parse().map_err(|_| bad())?;
    if f >= 0.0 && f.fract() == 0.0 && f < usize::MAX as f64 {
        Ok(f as usize)
    } else {
        Err(bad())
    }
}

/// Parses `length=10^6,seed=1,order=3,sharpness=2,records=1` plus optional
/// `repeat-len`, `repeat-min`, `repeat-max`, `repeat-coverage`.
pub fn synthetic_records(spec: &str) -> Result<Vec<FastaRecord>> {
    let mut length = None;
    let (mut seed, mut order, mut sharpness, mut records) = (0u64, 3usize, 2.0f64, 1usize);
    let mut repeat = RepeatPlan {
        segment_len: 0,
        min_distance: 64,
        max_distance: 384,
        coverage: 0.3,
    };
    let float = |v: &str| v.parse::<f64>().map_err(|_| Error::invalid_arg(format!("bad number `{v}`")));
    for field in spec.split(',').map(str::trim).filter(|f| !f.is_empty()) {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::invalid_arg(format!("synthetic field `{field}` is not key=value")))?;
        match k.trim().replace('_', "-").as_str() {
            "length" => length = Some(parse_count(v)?),
            "seed" => seed = parse_count(v)? as u64,
            "order" => order = parse_count(v)?,
            "sharpness" => sharpness = float(v)?,
            "records" => records = parse_count(v)?,
            "repeat-len" => repeat.segment_len = parse_count(v)?,
            "repeat-min" => repeat.min_distance = parse_count(v)?,
            "repeat-max" => repeat.max_distance = parse_count(v)?,
            "repeat-coverage" => repeat.coverage = float(v)?,
            other => return Err(Error::invalid_arg(format!("unknown synthetic field `{other}`"))),
        }
    }
    let length = length.ok_or_else(|| Error::invalid_arg("synthetic spec needs length="))?;
    let plan = (repeat.segment_len > 0).then_some(repeat);
    (0..records)
        .map(|i| {
            let (mut rec, _) = generate_with_chain(seed + i as u64, length, order, sharpness, plan.as_ref())?;
            rec.header = format!("syn{i} {}", rec.header);
            Ok(rec)
        })
        .collect()
}

fn first_word(name: &str) -> &str {
    name.split_whitespace().next().unwrap_or("")
}

fn prepare(a: PrepareArgs, out: &mut dyn Write) -> Result<()> {
    let records = match (&a.synthetic, a.fasta.is_empty()) {
        (Some(spec), true) => synthetic_records(spec)?,
        (None, false) => {
            let mut all = Vec::new();
            for path in &a.fasta {
                all.extend(at(path, read_fasta_file(path)).map_err(|e| match e {
                    Error::MalformedInput { line, message } => Error::MalformedInput {
                        line,
                        message: format!("{}: {message}", path.display()),
                    },
                    other => other,
                })?);
            }
            all
        }
        _ => return Err(Error::invalid_arg("choose exactly one of --fasta or --synthetic")),
    };
    let windows = extract_windows(&records, a.window_len, a.max_ambiguous_fraction)?;
    let (train_set, eval_set) = if a.holdout_records.is_empty() {
        split_train_eval(&windows, a.eval_fraction, a.seed)?
    } else {
        let names: Vec<&str> = windows
            .record_names
            .iter()
            .filter(|n| a.holdout_records.iter().any(|h| h == *n || h == first_word(n)))
            .map(String::as_str)
            .collect();
        if names.len() < a.holdout_records.len() {
            return Err(Error::invalid_arg(format!("unknown record in {:?}", a.holdout_records)));
        }
        split_by_record(&windows, &names)?
    };
    fs::create_dir_all(&a.out_dir)?;
    TokenShard::from_windows(&train_set.windows, a.window_len)?.save(a.out_dir.join("train.shard"))?;
    TokenShard::from_windows(&eval_set.windows, a.window_len)?.save(a.out_dir.join("eval.shard"))?;
    let stats = stats_report(&windows, &train_set, &eval_set);
    fs::write(a.out_dir.join("stats.txt"), &stats)?;
    write!(out, "{stats}")?;
    Ok(())
}

fn train_config(s: &ScheduleArgs) -> TrainConfig {
    TrainConfig {
        batch_size: s.batch_size,
        beta1: s.beta1,
        beta2: s.beta2,
        eps: s.adam_eps,
        weight_decay: s.weight_decay,
        max_grad_norm: s.max_grad_norm,
        lr_peak: s.lr_peak,
        lr_min: s.lr_min,
        warmup_iters: s.warmup,
        total_iters: s.steps,
        decay: match s.decay {
            DecayArg::Cosine => DecayKind::Cosine,
            DecayArg::Linear => DecayKind::Linear,
        },
        seed: s.seed,
    }
}

/// Runs `body` with a step callback that logs metrics and progress.
fn with_logging<T>(
    s: &ScheduleArgs,
    err: &mut dyn Write,
    body: impl FnOnce(&mut TrainOptions) -> Result<T>,
) -> Result<T> {
    let mut log = match &s.metrics {
        Some(p) => Some(MetricsLog::new(BufWriter::new(File::create(p)?))),
        None => None,
    };
    let every = s.log_every;
    let mut callback = |r: &StepRecord| -> Result<()> {
        if let Some(l) = log.as_mut() {
            l.write(r)?;
        }
        if every > 0 && (r.step + 1).is_multiple_of(every) {
            writeln!(err, "step {:>6}  lr {:.3e}  loss {:.4}  ppl {:.4}  |g| {:.3}", r.step + 1, r.lr, r.loss, r.ppl, r.grad_norm)?;
        }
        Ok(())
    };
    let result = body(&mut TrainOptions {
        stop_after: s.stop_after,
        on_step: Some(&mut callback),
    });
    if let Some(l) = log {
        l.into_inner().flush()?;
    }
    result
}

fn summarize(out: &mut dyn Write, ck: &Checkpoint, records: &[StepRecord], path: &Path) -> Result<()> {
    match records.last() {
        Some(r) => writeln!(
            out,
            "step={} loss={:.6} ppl={:.6} context={} rope_base={} checkpoint={}",
            ck.step,
            r.loss,
            r.ppl,
            ck.model.config.max_seq_len,
            ck.model.config.rope_base,
            path.display()
        )?,
        None => writeln!(out, "step={} (no updates) checkpoint={}", ck.step, path.display())?,
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let data = at(a.data.as_ref(), TokenShard::load(&a.data))?;
    let ck = match &a.resume {
        Some(path) => at(path.as_ref(), Checkpoint::load(path))?,
        None => {
            let model = ModelConfig {
                vocab_size: VOCAB_SIZE,
                hidden: a.hidden,
                n_layers: a.layers,
                n_heads: a.heads,
                ffn_dim: a.ffn_dim,
                max_seq_len: a.context.unwrap_or(data.window_len),
                rope_base: a.rope_base,
                tie_embeddings: a.tie_embeddings,
                ..ModelConfig::desk_default()
            };
            Checkpoint::fresh(&model, &train_config(&a.schedule), a.data_seed)?
        }
    };
    let (ck, records) = with_logging(&a.schedule, err, |opts| train(ck, &data, opts))?;
    ck.save(&a.out)?;
    summarize(out, &ck, &records, &a.out)
}

fn extend_cmd(a: ExtendArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let prev = at(a.checkpoint.as_ref(), Checkpoint::load(&a.checkpoint))?;
    let data = at(a.data.as_ref(), TokenShard::load(&a.data))?;
    let cfg = &prev.model.config;
    let base = a
        .rope_base
        .unwrap_or_else(|| default_next_base(cfg.rope_base, cfg.max_seq_len, a.context, None));
    let schedule = train_config(&a.schedule);
    let (ck, records) = with_logging(&a.schedule, err, |opts| {
        extend_context(&prev, a.context, base, &schedule, &data, opts)
    })?;
    ck.save(&a.out)?;
    summarize(out, &ck, &records, &a.out)
}

fn eval_ppl(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = at(a.checkpoint.as_ref(), Checkpoint::load(&a.checkpoint))?.model;
    let data = at(a.data.as_ref(), TokenShard::load(&a.data))?;
    let length = a.length.unwrap_or(data.window_len);
    if length > model.config.max_seq_len {
        return Err(Error::ContextOverflow {
            len: length,
            max: model.config.max_seq_len,
        });
    }
    let id = model_id(&a.checkpoint);
    let report = length_sweep(&[(id.as_str(), &model as &dyn LanguageModel)], &data, &[length], a.max_sequences)?;
    let row = &report.rows[0];
    writeln!(
        out,
        "ppl={:.6} recon_acc={:.6} mean_nll={:.6} n_sequences={} n_scored_tokens={}",
        row.ppl.unwrap_or(f64::NAN),
        row.recon_acc.unwrap_or(f64::NAN),
        row.mean_nll.unwrap_or(f64::NAN),
        row.n_sequences,
        row.n_scored_tokens
    )?;
    if let Some(path) = &a.out {
        report.write_jsonl(BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}

fn model_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn sweep(a: SweepArgs, out: &mut dyn Write) -> Result<()> {
    let data = at(a.data.as_ref(), TokenShard::load(&a.data))?;
    let mut models = Vec::with_capacity(a.checkpoint.len());
    for spec in &a.checkpoint {
        let (id, path) = match spec.split_once('=') {
            Some((id, path)) => (id.to_string(), Path::new(path)),
            None => (model_id(Path::new(spec)), Path::new(spec.as_str())),
        };
        models.push((id, at(path, Checkpoint::load(path))?.model));
    }
    let refs: Vec<(&str, &dyn LanguageModel)> = models.iter().map(|(id, m)| (id.as_str(), m as &dyn LanguageModel)).collect();
    let report = length_sweep(&refs, &data, &a.lengths, a.max_sequences)?;
    let csv = report.to_csv();
    match &a.out {
        Some(path) => fs::write(path, &csv)?,
        None => write!(out, "{csv}")?,
    }
    if let Some(path) = &a.jsonl {
        report.write_jsonl(BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}

fn embed_options(e: &EmbedSettings) -> Result<EmbedOptions> {
    let layer = match e.layer.as_str() {
        "final" => HiddenLayer::FinalNorm,
        "embedding" => HiddenLayer::Embedding,
        n => HiddenLayer::Block(
            n.parse()
                .map_err(|_| Error::invalid_arg(format!("--layer `{n}` is not final, embedding or a block index")))?,
        ),
    };
    let pooling = match e.pooling {
        PoolingArg::Max => Pooling::Max,
        PoolingArg::Mean => Pooling::Mean,
    };
    Ok(EmbedOptions { pooling, layer })
}

/// Sequences from a FASTA file or a labelled dataset.
fn read_sequences(path: &Path) -> Result<Vec<String>> {
    let text = fs::read(path)?;
    let first = text.iter().find(|b| !b.is_ascii_whitespace());
    if first == Some(&b'>') || text.starts_with(&[0x1f, 0x8b]) {
        Ok(read_fasta_file(path)?.into_iter().map(|r| r.sequence).collect())
    } else {
        Ok(at(path, LabeledDataset::load(path))?.items.into_iter().map(|i| i.sequence).collect())
    }
}

fn embed(a: EmbedArgs, out: &mut dyn Write) -> Result<()> {
    let model = at(a.checkpoint.as_ref(), Checkpoint::load(&a.checkpoint))?.model;
    let seqs = read_sequences(&a.input)?;
    let refs: Vec<&str> = seqs.iter().map(String::as_str).collect();
    let matrix = embed_all(&model, &refs, embed_options(&a.embed)?)?;
    let tsv = matrix.to_tsv();
    match &a.out {
        Some(path) => fs::write(path, tsv)?,
        None => write!(out, "{tsv}")?,
    }
    Ok(())
}

fn single_label(ds: &LabeledDataset, path: &Path) -> Result<Vec<usize>> {
    ds.classes()
        .ok_or_else(|| Error::invalid_arg(format!("{}: the probe needs binary or multiclass labels", path.display())))
}

fn probe(a: ProbeArgs, out: &mut dyn Write) -> Result<()> {
    let model = at(a.checkpoint.as_ref(), Checkpoint::load(&a.checkpoint))?.model;
    let train_ds = at(a.train.as_ref(), LabeledDataset::load(&a.train))?;
    let test_ds = at(a.test.as_ref(), LabeledDataset::load(&a.test))?;
    let (train_y, test_y) = (single_label(&train_ds, &a.train)?, single_label(&test_ds, &a.test)?);
    let opts = embed_options(&a.embed)?;
    let train_x = embed_all(&model, &train_ds.sequences(), opts)?;
    let test_x = embed_all(&model, &test_ds.sequences(), opts)?;
    let cfg = ProbeConfig {
        epochs: a.epochs,
        lr: a.lr,
        l2: a.l2,
    };
    let report = train_probe(&train_x.rows, &train_y, &test_x.rows, &test_y, &cfg)?;
    writeln!(
        out,
        "macro_f1={} accuracy={} n_train={} n_test={}",
        fmt_opt(report.macro_f1),
        fmt_opt(report.accuracy),
        report.n_train,
        report.n_test
    )?;
    if let Some(path) = &a.out {
        fs::write(path, to_json(&report)?)?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))
}

fn finetune(a: FinetuneArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let model = at(a.checkpoint.as_ref(), Checkpoint::load(&a.checkpoint))?.model;
    let train_ds = at(a.train.as_ref(), LabeledDataset::load(&a.train))?;
    let test_ds = at(a.test.as_ref(), LabeledDataset::load(&a.test))?;
    let cfg = FinetuneConfig {
        optimizer: TrainConfig {
            batch_size: a.batch_size,
            lr_peak: a.lr_peak,
            weight_decay: a.weight_decay,
            decay: match a.decay {
                DecayArg::Cosine => DecayKind::Cosine,
                DecayArg::Linear => DecayKind::Linear,
            },
            seed: a.seed,
            ..TrainConfig::finetune(0)
        },
        epochs: a.epochs,
        warmup_ratio: a.warmup_ratio,
    };
    let mode = match a.mode {
        ModeArg::AllLayers => FinetuneMode::AllLayers,
        ModeArg::HeadOnly => FinetuneMode::HeadOnly,
    };
    let outcome = finetune_classify(&model, &train_ds, &test_ds, mode, &cfg)?;
    for w in &outcome.warnings {
        writeln!(err, "warning: {w}")?;
    }
    outcome.classifier.save(&a.out_dir)?;
    let json = to_json(&outcome.metrics)?;
    writeln!(out, "{json}")?;
    if let Some(path) = &a.metrics {
        fs::write(path, json)?;
    }
    Ok(())
}
