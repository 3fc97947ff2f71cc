//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{is_decayed, ViTParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers in canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ViTParams<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .entries()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update. `grads` follows canonical order; parameters whose name
    /// does not end in `.weight` are not decayed.
    pub fn update(
        &mut self,
        params: &mut ViTParams<f32>,
        grads: &[Vec<f32>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let names: Vec<String> = params.entries().into_iter().map(|(n, _)| n).collect();
        let mut values = params.values_mut();
        if grads.len() != values.len() || self.m.len() != values.len() {
            return Err(Error::State(format!(
                "{} gradients for {} parameters",
                grads.len(),
                values.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = ADAM_EPS as f32;
        for (i, p) in values.iter_mut().enumerate() {
            let decay = if is_decayed(&names[i]) {
                (1.0 - lr * weight_decay) as f32
            } else {
                1.0
            };
            update_tensor(p, &grads[i], &mut self.m[i], &mut self.v[i], decay, |m, v| {
                step_size * m / (v.sqrt() / bc2_sqrt + eps)
            }, b1, b2)?;
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update_tensor(
    p: &mut Tensor<f32>,
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    decay: f32,
    delta: impl Fn(f32, f32) -> f32,
    b1: f32,
    b2: f32,
) -> Result<()> {
    if g.len() != p.numel() {
        return Err(Error::shape("adamw", p.shape(), &[g.len()]));
    }
    for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
        *x *= decay;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *x -= delta(*m, *v);
    }
    Ok(())
}

/// Learning rate at `step` of `total`: half-cosine from `peak` to 0.
pub fn cosine_lr(peak: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return peak;
    }
    let frac = step.min(total) as f64 / total as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * frac).cos())
}
