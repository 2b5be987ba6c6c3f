//! Rotary position embedding: pair `i` of a head at position `m` is rotated
//! by `m * base^(-2i / head_dim)`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{Graph, RotationTable, Tensor};

/// Rotation angles per (position, pair), stored as cos/sin tables.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeAngles {
    table: Arc<RotationTable>,
}

/// `theta_i = base^(-2i / head_dim)` for each pair `i`.
pub fn rope_frequencies(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect()
}

pub fn rope_angles(head_dim: usize, base: f64, positions: &[usize]) -> Result<RopeAngles> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::shape(format!("rotary head_dim {head_dim} must be even and positive")));
    }
    if !(base > 0.0) {
        return Err(Error::invalid_arg(format!("rotary base {base} must be positive")));
    }
    let freqs = rope_frequencies(head_dim, base);
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &m in positions {
        for &theta in &freqs {
            let angle = m as f64 * theta;
            cos.push(angle.cos() as f32);
            sin.push(angle.sin() as f32);
        }
    }
    Ok(RopeAngles {
        table: Arc::new(RotationTable {
            seq_len: positions.len(),
            half_dim: half,
            cos,
            sin,
        }),
    })
}

impl RopeAngles {
    /// Angles for positions `0..seq_len`.
    pub fn for_length(head_dim: usize, base: f64, seq_len: usize) -> Result<Self> {
        let positions: Vec<usize> = (0..seq_len).collect();
        rope_angles(head_dim, base, &positions)
    }

    pub fn n_positions(&self) -> usize {
        self.table.seq_len
    }

    pub fn head_dim(&self) -> usize {
        2 * self.table.half_dim
    }

    pub fn cos_sin(&self, position_row: usize, pair: usize) -> (f32, f32) {
        let idx = position_row * self.table.half_dim + pair;
        (self.table.cos[idx], self.table.sin[idx])
    }

    /// The first `len` position rows.
    pub fn prefix(&self, len: usize) -> RopeAngles {
        if len >= self.n_positions() {
            return self.clone();
        }
        let half = self.table.half_dim;
        RopeAngles {
            table: Arc::new(RotationTable {
                seq_len: len,
                half_dim: half,
                cos: self.table.cos[..len * half].to_vec(),
                sin: self.table.sin[..len * half].to_vec(),
            }),
        }
    }

    pub(crate) fn table(&self) -> Arc<RotationTable> {
        self.table.clone()
    }

    /// Applies the rotation to `x [t x head_dim]`, row `r` using position row `r`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.head_dim() {
            return Err(Error::shape(format!(
                "rotary input of width {} for head_dim {}",
                x.cols(),
                self.head_dim()
            )));
        }
        if x.rows() != self.n_positions() {
            return Err(Error::shape(format!(
                "rotary input with {} rows for {} positions",
                x.rows(),
                self.n_positions()
            )));
        }
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = g.rotate_pairs(v, self.table())?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn position_zero_is_identity() {
        let angles = rope_angles(8, 10_000.0, &[0]).unwrap();
        for i in 0..4 {
            assert_eq!(angles.cos_sin(0, i), (1.0, 0.0));
        }
        let x = Tensor::new(vec![1, 8], (0..8).map(|v| v as f32 - 3.3).collect()).unwrap();
        assert_eq!(angles.apply(&x).unwrap(), x);
    }

    #[test]
    fn frequency_formula() {
        let f = rope_frequencies(4, 10_000.0);
        assert_eq!(f[0], 1.0);
        assert!((f[1] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn larger_base_shrinks_angles() {
        let lo = rope_frequencies(64, 1e4);
        let hi = rope_frequencies(64, 1.5e7);
        for i in 1..32 {
            assert!(hi[i] < lo[i]);
        }
        assert_eq!(hi[0], lo[0]);
    }

    #[test]
    fn odd_head_dim_is_shape_error() {
        assert!(matches!(rope_angles(5, 1e4, &[0, 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let angles = RopeAngles::for_length(16, 10_000.0, 64).unwrap();
        let x = Tensor::randn(&[64, 16], 1.0, &mut rng);
        let y = angles.apply(&x).unwrap();
        for r in 0..64 {
            let n0: f32 = x.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            let n1: f32 = y.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n0 - n1).abs() < 1e-5);
        }
    }
}
