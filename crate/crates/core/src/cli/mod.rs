//! The `genelm` command line.
//!
//! Every subcommand accepts `--config FILE`, a flat `key=value` file whose keys
//! are long flag names. Flags given on the command line win. The merged
//! configuration is echoed to stderr as a listing that is itself a valid
//! config file.
//!
//! Exit codes: 0 success, 1 numeric failure (divergence, non-finite values),
//! 2 usage or input errors.

mod commands;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERIC: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "genelm", version, about = "Nucleotide-level language models: data, training, evaluation and downstream tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Cut FASTA or synthetic genomes into token shards
    Prepare(PrepareArgs),
    /// Pretrain a model from scratch (or resume a checkpoint)
    Train(TrainArgs),
    /// Continue pretraining at a longer context with a new rotary base
    Extend(ExtendArgs),
    /// Perplexity and reconstruction accuracy on a shard
    EvalPpl(EvalArgs),
    /// Perplexity of several checkpoints across evaluation lengths
    Sweep(SweepArgs),
    /// Pooled sequence embeddings as TSV
    Embed(EmbedArgs),
    /// Linear probe on frozen embeddings
    Probe(ProbeArgs),
    /// Train a classification head, optionally with the backbone
    Finetune(FinetuneArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// FASTA inputs (plain or gzip), comma-separated
    #[arg(long, value_delimiter = ',', conflicts_with = "synthetic")]
    pub fasta: Vec<PathBuf>,
    /// Synthetic genome spec, e.g. length=10^6,seed=1,order=3,sharpness=2,records=1
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long, default_value_t = 512)]
    pub window_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub max_ambiguous_fraction: f64,
    #[arg(long, default_value_t = 0.01)]
    pub eval_fraction: f64,
    /// Hold out whole records (comma-separated names) instead of a window shuffle
    #[arg(long, value_delimiter = ',')]
    pub holdout_records: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// key=value file of flag defaults; command-line flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecayArg {
    Cosine,
    Linear,
}

/// Optimizer and schedule flags shared by `train` and `extend`.
#[derive(Args, Debug, Clone)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub steps: u64,
    #[arg(long)]
    pub warmup: u64,
    #[arg(long)]
    pub batch_size: usize,
    #[arg(long)]
    pub lr_peak: f64,
    #[arg(long)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 0.1)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub max_grad_norm: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.95)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, value_enum, default_value_t = DecayArg::Cosine)]
    pub decay: DecayArg,
    /// Seeds initialisation and batch order
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stop after this many updates even if the schedule continues
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// JSON-lines file receiving one record per step
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Print progress every N steps (0 disables)
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training token shard
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Continue this checkpoint with its stored schedule; model flags are ignored
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 352)]
    pub ffn_dim: usize,
    /// Context length [default: the shard's window length]
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long, default_value_t = 10_000.0)]
    pub rope_base: f64,
    /// Share the input embedding with the output projection
    #[arg(long)]
    pub tie_embeddings: bool,
    /// Seed recorded for the data split
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// key=value file of flag defaults; command-line flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtendArgs {
    /// Checkpoint to extend
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training token shard with windows of at least --context tokens
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// New context length
    #[arg(long)]
    pub context: usize,
    /// New rotary base [default: previous base times the squared length ratio]
    #[arg(long)]
    pub rope_base: Option<f64>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// key=value file of flag defaults; command-line flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation token shard
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation length [default: the shard's window length]
    #[arg(long)]
    pub length: Option<usize>,
    /// Evaluate at most this many windows
    #[arg(long)]
    pub max_sequences: Option<usize>,
    /// JSON-lines report file
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// key=value file of flag defaults; command-line flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Checkpoints as PATH or ID=PATH, comma-separated
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoint: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub lengths: Vec<usize>,
    #[arg(long)]
    pub max_sequences: Option<usize>,
    /// CSV report [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Additional JSON-lines report
    #[arg(long)]
    pub jsonl: Option<PathBuf>,
    /// key=value file of flag defaults; command-line flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Max,
    Mean,
}

/// Which activations are pooled into an embedding.
#[derive(Args, Debug, Clone)]
pub struct EmbedSettings {
    #[arg(long, value_enum, default_value_t = PoolingArg::Max)]
    pub pooling: PoolingArg,
    /// final, embedding, or a block index
    #[arg(long, default_value = "final")]
    pub layer: String,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// FASTA file or labelled dataset
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub embed: EmbedSettings,
    /// TSV output [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// key=value file of flag defaults; command-line flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled training dataset (binary or multiclass)
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub embed: EmbedSettings,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    /// JSON report
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// key=value file of flag defaults; command-line flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    AllLayers,
    HeadOnly,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::AllLayers)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_peak: f64,
    #[arg(long, value_enum, default_value_t = DecayArg::Linear)]
    pub decay: DecayArg,
    #[arg(long, default_value_t = 0.1)]
    pub warmup_ratio: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving backbone.ckpt and head.json
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON metrics record [default: stdout only]
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// key=value file of flag defaults; command-line flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Schedule defaults per subcommand: the desk-scale base and extension plans.
const SCHEDULE_DEFAULTS: [(&str, [(&str, &str); 5]); 2] = [
    ("train", [("steps", "1000"), ("warmup", "50"), ("batch_size", "8"), ("lr_peak", "0.00048"), ("lr_min", "0.000048")]),
    ("extend", [("steps", "200"), ("warmup", "20"), ("batch_size", "4"), ("lr_peak", "0.0001"), ("lr_min", "0.00004")]),
];

/// The full clap command, with per-subcommand defaults applied.
pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for (sub, defaults) in SCHEDULE_DEFAULTS {
        cmd = cmd.mut_subcommand(sub, |mut c| {
            for (id, value) in defaults {
                c = c.mut_arg(id, |a| a.required(false).default_value(value));
            }
            c
        });
    }
    cmd
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric_failure() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::MalformedInput {
            line: i + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn flag_given(args: &[OsString], key: &str) -> bool {
    let flag = format!("--{key}");
    args.iter().any(|a| {
        let a = a.to_string_lossy();
        a == flag || a.starts_with(&format!("{flag}="))
    })
}

/// Splices config-file values in front of the user's flags, skipping keys the
/// user set explicitly.
fn merge_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let pos = args.iter().position(|a| a == "--config").map(|i| (i, i + 1)).or_else(|| {
        args.iter()
            .position(|a| a.to_string_lossy().starts_with("--config="))
            .map(|i| (i, i))
    });
    let Some((flag_idx, value_idx)) = pos else {
        return Ok(args);
    };
    let path = if flag_idx == value_idx {
        args[flag_idx].to_string_lossy()["--config=".len()..].to_string()
    } else {
        match args.get(value_idx) {
            Some(v) => v.to_string_lossy().into_owned(),
            None => return Ok(args),
        }
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::InvalidArgument(format!("config file {path}: {e}")))?;
    let Some(sub_idx) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|i| i + 1) else {
        return Ok(args);
    };
    let mut extra = Vec::new();
    for (key, value) in parse_config_text(&text)? {
        if key == "config" || flag_given(&args, &key) {
            continue;
        }
        match value.as_str() {
            "true" => extra.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => extra.push(OsString::from(format!("--{key}={value}"))),
        }
    }
    let mut merged = args[..=sub_idx].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&args[sub_idx + 1..]);
    Ok(merged)
}

/// Canonical `key=value` listing of every set argument of the subcommand.
pub fn canonical_listing(matches: &clap::ArgMatches) -> String {
    let Some((name, sub)) = matches.subcommand() else {
        return String::new();
    };
    let cmd = command();
    let sub_cmd = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let mut lines = vec![format!("# genelm {name}")];
    for arg in sub_cmd.get_arguments() {
        let id = arg.get_id().as_str();
        if id == "config" || id == "help" || arg.get_long().is_none() {
            continue;
        }
        let Some(values) = sub.get_raw(id) else {
            continue;
        };
        let joined: Vec<String> = values.map(|v| v.to_string_lossy().into_owned()).collect();
        let value = match arg.get_action() {
            ArgAction::SetTrue => (sub.get_flag(id)).to_string(),
            _ => joined.join(","),
        };
        lines.push(format!("{}={value}", arg.get_long().unwrap()));
    }
    lines.join("\n") + "\n"
}

fn configure_threads(err: &mut dyn Write) {
    if let Ok(v) = std::env::var("GENELM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                // a second call in the same process keeps the existing pool
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                let _ = writeln!(err, "genelm: ignoring GENELM_THREADS={v}");
            }
        }
    }
}

/// Runs the command line `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "genelm: error: {e}");
            return EXIT_USAGE;
        }
    };
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return EXIT_USAGE;
        }
    };
    configure_threads(err);
    let _ = write!(err, "{}", canonical_listing(&matches));
    match commands::dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "genelm: error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_text_parsing() {
        let kv = parse_config_text("# c\nwindow_len = 64\n\nseed=3\n").unwrap();
        assert_eq!(kv, vec![("window-len".into(), "64".into()), ("seed".into(), "3".into())]);
        assert!(matches!(parse_config_text("a=1\nnope\n"), Err(Error::MalformedInput { line: 2, .. })));
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "window-len=64\nseed=9\ntie-embeddings=true\n").unwrap();
        let merged = merge_config(os(&["genelm", "prepare", "--out-dir", "o", "--seed", "1", "--config", cfg.to_str().unwrap()])).unwrap();
        let m = command()
            .try_get_matches_from(&merged)
            .map(|m| m.subcommand_matches("prepare").unwrap().clone());
        // tie-embeddings is not a prepare flag
        assert!(m.is_err());
        fs::write(&cfg, "window-len=64\nseed=9\n").unwrap();
        let merged = merge_config(os(&["genelm", "prepare", "--out-dir", "o", "--seed", "1", "--config", cfg.to_str().unwrap()])).unwrap();
        let m = command().try_get_matches_from(&merged).unwrap();
        let sub = m.subcommand_matches("prepare").unwrap();
        assert_eq!(sub.get_one::<usize>("window_len"), Some(&64));
        assert_eq!(sub.get_one::<u64>("seed"), Some(&1));
    }

    #[test]
    fn listing_reparses_to_the_same_arguments() {
        let argv = os(&["genelm", "sweep", "--checkpoint", "a=x.ckpt,y.ckpt", "--data", "d.shard", "--lengths", "64,128"]);
        let m = command().try_get_matches_from(&argv).unwrap();
        let listing = canonical_listing(&m);
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, &listing).unwrap();
        let again = merge_config(os(&["genelm", "sweep", "--config", cfg.to_str().unwrap()])).unwrap();
        let m2 = command().try_get_matches_from(&again).unwrap();
        assert_eq!(canonical_listing(&m2), listing);
        assert!(listing.contains("lengths=64,128\n"));
    }

    #[test]
    fn exit_code_mapping() {
        assert_eq!(exit_code(&Error::TrainingDiverged { step: 1, message: String::new() }), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Numeric(String::new())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::MalformedInput { line: 1, message: String::new() }), EXIT_USAGE);
    }
}
