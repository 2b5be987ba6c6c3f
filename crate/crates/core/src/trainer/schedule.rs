use std::f64::consts::PI;

use super::{DecayKind, TrainConfig};
use crate::error::{Error, Result};

/// Learning rate after `step` optimizer updates: linear warmup from 0 to
/// `lr_peak`, then cosine (or linear) decay to `lr_min` at `total_iters`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_iters {
        return Err(Error::invalid_arg(format!(
            "step {step} past the schedule end {}",
            cfg.total_iters
        )));
    }
    let (w, total) = (cfg.warmup_iters, cfg.total_iters);
    if step < w {
        return Ok(cfg.lr_peak * (step as f64 / w as f64));
    }
    if step == total {
        return Ok(cfg.lr_min);
    }
    if step == w {
        return Ok(cfg.lr_peak);
    }
    let u = (step - w) as f64 / (total - w) as f64;
    let span = cfg.lr_peak - cfg.lr_min;
    Ok(match cfg.decay {
        DecayKind::Cosine => cfg.lr_min + span * (1.0 + (PI * u).cos()) / 2.0,
        DecayKind::Linear => cfg.lr_min + span * (1.0 - u),
    })
}
