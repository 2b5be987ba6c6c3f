use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FastaRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceStats {
    pub total_bp_read: u64,
    pub windows_kept: usize,
    pub windows_dropped_ambiguous: usize,
}

/// Where a window came from: index into `WindowSet::record_names` and the
/// 0-based start offset within that record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowOrigin {
    pub record: usize,
    pub start: usize,
}

/// Fixed-length windows cut from one or more records.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<String>,
    pub origins: Vec<WindowOrigin>,
    pub record_names: Vec<String>,
    pub window_len: usize,
    pub source_stats: SourceStats,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    fn subset(&self, indices: &[usize]) -> WindowSet {
        WindowSet {
            windows: indices.iter().map(|&i| self.windows[i].clone()).collect(),
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
            record_names: self.record_names.clone(),
            window_len: self.window_len,
            source_stats: SourceStats {
                windows_kept: indices.len(),
                ..self.source_stats
            },
        }
    }
}

fn is_ambiguous(b: u8) -> bool {
    !matches!(b, b'A' | b'C' | b'G' | b'T')
}

/// Cuts every record into consecutive non-overlapping windows. Trailing
/// remainders are dropped, as is any window whose non-ACGT fraction exceeds
/// `max_ambiguous_fraction`.
pub fn extract_windows(
    records: &[FastaRecord],
    window_len: usize,
    max_ambiguous_fraction: f64,
) -> Result<WindowSet> {
    if window_len == 0 {
        return Err(Error::invalid_arg("window_len must be at least 1"));
    }
    if !(0.0..=1.0).contains(&max_ambiguous_fraction) {
        return Err(Error::invalid_arg(format!(
            "max_ambiguous_fraction {max_ambiguous_fraction} outside [0, 1]"
        )));
    }
    let mut set = WindowSet {
        windows: Vec::new(),
        origins: Vec::new(),
        record_names: records.iter().map(|r| r.header.clone()).collect(),
        window_len,
        source_stats: SourceStats::default(),
    };
    for (ri, rec) in records.iter().enumerate() {
        let bytes = rec.sequence.as_bytes();
        set.source_stats.total_bp_read += bytes.len() as u64;
        for (wi, chunk) in bytes.chunks_exact(window_len).enumerate() {
            let ambiguous = chunk.iter().filter(|&&b| is_ambiguous(b)).count();
            if ambiguous as f64 / window_len as f64 > max_ambiguous_fraction {
                set.source_stats.windows_dropped_ambiguous += 1;
                continue;
            }
            // FastaRecord sequences are ASCII by construction.
            set.windows.push(String::from_utf8_lossy(chunk).into_owned());
            set.origins.push(WindowOrigin {
                record: ri,
                start: wi * window_len,
            });
        }
    }
    set.source_stats.windows_kept = set.windows.len();
    Ok(set)
}

fn eval_count(n: usize, eval_fraction: f64) -> usize {
    // guard against representation error pushing an exact product over an integer
    let raw = n as f64 * eval_fraction;
    let count = (raw - raw.abs() * 1e-12).ceil();
    (count.max(0.0) as usize).min(n)
}

/// Seeded shuffle over windows; the first `ceil(N * eval_fraction)` go to eval.
pub fn split_train_eval(
    windows: &WindowSet,
    eval_fraction: f64,
    seed: u64,
) -> Result<(WindowSet, WindowSet)> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::invalid_arg(format!(
            "eval_fraction {eval_fraction} outside [0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_eval = eval_count(windows.len(), eval_fraction);
    let (eval_idx, train_idx) = order.split_at(n_eval);
    Ok((windows.subset(train_idx), windows.subset(eval_idx)))
}

/// Region-level split: every window from a named record goes to eval.
pub fn split_by_record(
    windows: &WindowSet,
    held_out: &[&str],
) -> Result<(WindowSet, WindowSet)> {
    let names: HashSet<&str> = held_out.iter().copied().collect();
    for name in &names {
        if !windows.record_names.iter().any(|r| r == name) {
            return Err(Error::invalid_arg(format!("no record named {name:?}")));
        }
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (i, origin) in windows.origins.iter().enumerate() {
        if names.contains(windows.record_names[origin.record].as_str()) {
            eval.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((windows.subset(&train), windows.subset(&eval)))
}
