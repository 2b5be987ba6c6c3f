use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, f1, Averaging};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 500,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression on standardised features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[class][feature]`
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

fn softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

impl LinearProbe {
    /// Full-batch gradient descent on the mean cross-entropy plus an L2 term.
    pub fn fit(x: &[Vec<f32>], y: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::invalid_arg(format!("{} feature rows for {} labels", x.len(), y.len())));
        }
        let mut present = vec![false; n_classes];
        for &c in y {
            if c >= n_classes {
                return Err(Error::InvalidInput(format!("label {c} outside {n_classes} classes")));
            }
            present[c] = true;
        }
        if present.iter().filter(|&&p| p).count() < 2 {
            return Err(Error::DegenerateTask("probe training data holds a single class".into()));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64 / n;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for ((s, &v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let mut probe = LinearProbe {
            mean,
            scale,
            weights: vec![vec![0.0; d]; n_classes],
            bias: vec![0.0; n_classes],
        };
        let feats: Vec<Vec<f64>> = x.iter().map(|r| probe.standardise(r)).collect();
        for _ in 0..cfg.epochs {
            let mut gw = vec![vec![0.0; d]; n_classes];
            let mut gb = vec![0.0; n_classes];
            for (f, &label) in feats.iter().zip(y) {
                let mut p = probe.logits(f);
                softmax(&mut p);
                p[label] -= 1.0;
                for (c, &err) in p.iter().enumerate() {
                    gb[c] += err / n;
                    for (g, &v) in gw[c].iter_mut().zip(f) {
                        *g += err * v / n;
                    }
                }
            }
            for c in 0..n_classes {
                probe.bias[c] -= cfg.lr * gb[c];
                for (w, g) in probe.weights[c].iter_mut().zip(&gw[c]) {
                    *w -= cfg.lr * (g + cfg.l2 * *w);
                }
            }
        }
        Ok(probe)
    }

    fn standardise(&self, row: &[f32]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&v, m), s)| (v as f64 - m) * s)
            .collect()
    }

    fn logits(&self, f: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(f).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    pub fn probabilities(&self, row: &[f32]) -> Vec<f64> {
        let mut z = self.logits(&self.standardise(row));
        softmax(&mut z);
        z
    }

    /// Most probable class; lowest index on ties.
    pub fn predict(&self, row: &[f32]) -> usize {
        let p = self.probabilities(row);
        (0..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub macro_f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub predictions: Vec<usize>,
}

/// Fits a linear probe on frozen training embeddings and scores the test set.
pub fn train_probe(
    train_x: &[Vec<f32>],
    train_y: &[usize],
    test_x: &[Vec<f32>],
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if test_x.len() != test_y.len() || test_x.is_empty() {
        return Err(Error::invalid_arg("probe test split is empty or misaligned"));
    }
    let k = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
    let probe = LinearProbe::fit(train_x, train_y, k, cfg)?;
    let predictions: Vec<usize> = test_x.iter().map(|r| probe.predict(r)).collect();
    Ok(ProbeReport {
        macro_f1: f1(&predictions, test_y, Averaging::Macro),
        accuracy: accuracy(&predictions, test_y),
        n_train: train_x.len(),
        n_test: test_x.len(),
        predictions,
    })
}
