//! Adam with decoupled weight decay, and global-norm gradient clipping.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use super::config::{LrSchedule, TrainConfig};
use super::model::ParamStore;

/// Learning rate at `step`: a linear ramp over the warm-up steps, then
/// constant or half-cosine down to 0 at `cfg.steps`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f32 {
    let warm = (cfg.warmup as f64 * cfg.steps as f64).round() as usize;
    if step < warm {
        return cfg.lr * (step + 1) as f32 / warm as f32;
    }
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Cosine => {
            let span = cfg.steps.saturating_sub(warm).max(1) as f64;
            let t = ((step - warm) as f64 / span).min(1.0);
            (cfg.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    /// Parameters left untouched by [`AdamW::step`], weight decay included.
    frozen: Vec<bool>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f32, weight_decay: f32) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            frozen: vec![false; params.len()],
            t: 0,
        }
    }

    pub fn freeze(&mut self, index: usize) {
        self.frozen[index] = true;
    }

    /// One update; `grads[i]` belongs to the `i`-th parameter in store
    /// order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return shape_err(format!("{} gradients for {} parameters", grads.len(), self.m.len()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let decay = 1.0 - self.lr * self.weight_decay;
        let slots = params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v).zip(&self.frozen);
        for ((((p, g), m), v), &frozen) in slots {
            if p.shape() != g.shape() {
                return shape_err(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            if frozen {
                continue;
            }
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm = 0` disables clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f32) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Clips each group of gradients to `max_norm` on its own; `group[i]`
/// names the group of `grads[i]`. Returns the pre-clip norm per group id.
pub fn clip_group_norms(grads: &mut [Tensor], group: &[usize], max_norm: f32) -> Vec<f64> {
    assert_eq!(grads.len(), group.len(), "one group id per gradient");
    let groups = group.iter().max().map_or(0, |&m| m + 1);
    let mut sq = vec![0.0f64; groups];
    for (g, &id) in grads.iter().zip(group) {
        sq[id] += g.norm().powi(2);
    }
    let norms: Vec<f64> = sq.into_iter().map(f64::sqrt).collect();
    if max_norm > 0.0 {
        for (g, &id) in grads.iter_mut().zip(group) {
            if norms[id] > max_norm as f64 {
                let s = (max_norm as f64 / norms[id]) as f32;
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norms
}
