//! AdamW with a cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Adam moment buffers plus schedule bookkeeping, one slot per parameter in
/// registration order.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub base_lr: f64,
    pub total_epochs: usize,
    pub epoch: usize,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(params: &ParamStore, base_lr: f64, total_epochs: usize) -> OptimizerState {
        let m = (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect();
        let v = (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect();
        OptimizerState { m, v, step: 0, base_lr, total_epochs, epoch: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Current learning rate under the cosine schedule.
    pub fn lr(&self) -> f64 {
        cosine_lr(self.epoch, self.total_epochs, self.base_lr)
    }
}

/// Cosine decay from `base_lr` at epoch 0 toward 0 at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    assert!(total_epochs > 0, "cosine_lr: total_epochs must be positive");
    let frac = epoch as f64 / total_epochs as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One decoupled-weight-decay Adam update over every parameter.
///
/// `grads` must align with the store's registration order. A non-finite
/// gradient aborts the update naming the offending parameter.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    weight_decay: f64,
) -> Result<()> {
    assert_eq!(grads.len(), params.len(), "adamw_step: gradient count mismatch");
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient for parameter {:?} at optimizer step {}",
                params.name(i),
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = state.lr();
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for i in 0..params.len() {
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = params.data_mut(i);
        for j in 0..p.len() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * (mhat / (vhat.sqrt() + EPS) + weight_decay * p[j]);
        }
    }
    Ok(())
}
