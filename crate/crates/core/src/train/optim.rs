use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments with weight decay decoupled from the adaptive step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub step: u64,
    ids: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Zero moments for every trainable leaf of `store`.
    pub fn new(store: &ParamStore) -> Self {
        let params = store.params();
        Self {
            step: 0,
            ids: params.iter().map(|p| p.id.clone()).collect(),
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// Leaf ids this optimizer updates, in manifest order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// `θ ← θ − lr·wd·θ`, then `θ ← θ − lr·m̂/(√v̂ + ε)`. Leaves without a
    /// gradient are treated as having a zero gradient. Nothing is modified
    /// when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
        let params = store.params();
        if params.len() != self.ids.len() || params.iter().zip(&self.ids).any(|(p, id)| &p.id != id) {
            return Err(Error::Contract("optimizer state does not match the parameter manifest".into()));
        }
        for p in params {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(Error::NanGradient(p.id.clone()));
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.as_ref().map(Tensor::data);
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                theta[i] -= lr * weight_decay * theta[i];
                theta[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// `t ← α·t + (1 − α)·s` over every parameter and buffer.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if !teacher.same_manifest(student) {
        return Err(Error::Contract("teacher and student manifests differ".into()));
    }
    let mix = |t: &mut Tensor, s: &Tensor| {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    };
    for (t, s) in teacher.params_mut().iter_mut().zip(student.params()) {
        mix(&mut t.value, &s.value);
    }
    for (t, s) in teacher.buffers_mut().iter_mut().zip(student.buffers()) {
        mix(&mut t.1, &s.1);
    }
    Ok(())
}
