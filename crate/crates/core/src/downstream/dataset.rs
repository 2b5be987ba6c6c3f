use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multiclass(usize),
    Multilabel(usize),
}

impl TaskKind {
    /// Width of the classification head.
    pub fn n_outputs(&self) -> usize {
        match *self {
            TaskKind::Binary => 2,
            TaskKind::Multiclass(k) | TaskKind::Multilabel(k) => k,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Multiclass(_) => "multiclass",
            TaskKind::Multilabel(_) => "multilabel",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#task={} k={}", self.name(), self.n_outputs())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    Flags(Vec<bool>),
}

impl Target {
    pub fn class(&self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            Target::Flags(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledItem {
    pub sequence: String,
    pub target: Target,
}

/// Sequences with targets for one task. Train and test splits live in
/// separate files.
///
/// File layout: a header line such as `#task=multiclass k=5`, then one
/// `sequence<TAB>target` row per item; multilabel targets are comma-separated
/// 0/1 flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    pub task: TaskKind,
    pub items: Vec<LabeledItem>,
}

impl LabeledDataset {
    pub fn new(task: TaskKind, items: Vec<LabeledItem>) -> Result<Self> {
        let ds = LabeledDataset { task, items };
        for (i, item) in ds.items.iter().enumerate() {
            check_target(ds.task, &item.target)
                .map_err(|m| Error::InvalidInput(format!("item {i}: {m}")))?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn sequences(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.sequence.as_str()).collect()
    }

    /// Class labels; `None` for multilabel tasks.
    pub fn classes(&self) -> Option<Vec<usize>> {
        self.items.iter().map(|i| i.target.class()).collect()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.task)?;
        for item in &self.items {
            let target = match &item.target {
                Target::Class(c) => c.to_string(),
                Target::Flags(f) => f.iter().map(|&b| if b { "1" } else { "0" }).collect::<Vec<_>>().join(","),
            };
            writeln!(out, "{}\t{target}", item.sequence)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let err = |line: usize, m: String| Error::MalformedInput { line, message: m };
        let header = lines.next().ok_or_else(|| err(1, "empty dataset file".into()))??;
        let task = parse_header(header.trim_end()).map_err(|m| err(1, m))?;
        let mut items = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let line_no = i + 2;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (seq, target) = line
                .split_once('\t')
                .ok_or_else(|| err(line_no, "expected sequence<TAB>target".into()))?;
            if seq.is_empty() || !seq.bytes().all(|b| b.is_ascii_alphabetic()) {
                return Err(err(line_no, "sequence must be non-empty letters".into()));
            }
            let target = match task {
                TaskKind::Multilabel(_) => Target::Flags(
                    target
                        .split(',')
                        .map(|f| match f.trim() {
                            "0" => Ok(false),
                            "1" => Ok(true),
                            other => Err(err(line_no, format!("flag `{other}` is not 0 or 1"))),
                        })
                        .collect::<Result<_>>()?,
                ),
                _ => Target::Class(
                    target
                        .trim()
                        .parse()
                        .map_err(|_| err(line_no, format!("bad class label `{target}`")))?,
                ),
            };
            let item = LabeledItem {
                sequence: seq.to_ascii_uppercase(),
                target,
            };
            check_target(task, &item.target).map_err(|m| err(line_no, m))?;
            items.push(item);
        }
        Ok(LabeledDataset { task, items })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        LabeledDataset::read_from(BufReader::new(File::open(path)?))
    }
}

fn check_target(task: TaskKind, target: &Target) -> std::result::Result<(), String> {
    match (task, target) {
        (TaskKind::Binary, Target::Class(c)) if *c < 2 => Ok(()),
        (TaskKind::Multiclass(k), Target::Class(c)) if *c < k => Ok(()),
        (TaskKind::Multilabel(k), Target::Flags(f)) if f.len() == k => Ok(()),
        (task, t) => Err(format!("target {t:?} is not valid for {task}")),
    }
}

fn parse_header(line: &str) -> std::result::Result<TaskKind, String> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| format!("header `{line}` must start with #task="))?;
    let mut task = None;
    let mut k = None;
    for field in body.split_whitespace() {
        match field.split_once('=') {
            Some(("task", v)) => task = Some(v.to_string()),
            Some(("k", v)) => k = Some(v.parse::<usize>().map_err(|_| format!("bad k `{v}`"))?),
            _ => return Err(format!("unknown header field `{field}`")),
        }
    }
    match (task.as_deref(), k) {
        (Some("binary"), None | Some(2)) => Ok(TaskKind::Binary),
        (Some("multiclass"), Some(k)) if k >= 2 => Ok(TaskKind::Multiclass(k)),
        (Some("multilabel"), Some(k)) if k >= 1 => Ok(TaskKind::Multilabel(k)),
        _ => Err(format!("unsupported task header `{line}`")),
    }
}
