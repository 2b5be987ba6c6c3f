use super::TrainConfig;
use crate::error::{Error, Result};
use crate::kernels::Tensor;

/// First and second Adam moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamMoments {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamMoments { m: z.clone(), v: z }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// factor applied (1 when untouched).
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if !(norm > max_norm) {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v = (*v as f64 * scale) as f32;
        }
    }
    scale
}

/// One decoupled-weight-decay Adam update. `step` counts updates already
/// applied to these moments, so bias correction uses `step + 1`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    moments: &mut AdamMoments,
    step: u64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.m.len() || params.len() != moments.v.len() {
        return Err(Error::shape(format!(
            "adamw over {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.m.len()
        )));
    }
    if grads.iter().any(Tensor::has_non_finite) {
        return Err(Error::TrainingDiverged {
            step: step as usize,
            message: "non-finite gradient".into(),
        });
    }
    let t = step as i32 + 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        if p.shape() != grads[i].shape() {
            return Err(Error::shape(format!(
                "parameter {i} shape {:?} vs gradient {:?}",
                p.shape(),
                grads[i].shape()
            )));
        }
        let g = grads[i].data();
        let m = moments.m[i].data_mut();
        let v = moments.v[i].data_mut();
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            *theta = (*theta as f64 * decay - lr * update) as f32;
        }
    }
    Ok(())
}
