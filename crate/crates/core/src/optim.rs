//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Momentum,
    AdamW,
}

pub trait Optimizer {
    /// Applies one update from `(param, gradient)` pairs.
    fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Vec<f32>)]);
}

/// Heavy-ball gradient descent: `v ← μv + g; θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub lr: f64,
    pub mu: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Momentum {
    pub fn new(lr: f64, mu: f64) -> Self {
        Self {
            lr,
            mu,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Momentum {
    fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Vec<f32>)]) {
        for (id, g) in grads {
            if self.velocity.len() <= id.0 {
                self.velocity.resize(id.0 + 1, None);
            }
            let v = self.velocity[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
            for ((p, vi), gi) in store.value_mut(*id).data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.mu * *vi + *gi as f64;
                *p = (*p as f64 - self.lr * *vi) as f32;
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: Vec::new(),
        }
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Vec<f32>)]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            if self.moments.len() <= id.0 {
                self.moments.resize(id.0 + 1, None);
            }
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, p) in store.value_mut(*id).data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let x = *p as f64;
                *p = (x - self.lr * (step + self.weight_decay * x)) as f32;
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Vec<f32>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter().map(|&x| x as f64 * x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

pub fn build(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer> {
    match kind {
        OptimizerKind::Momentum => Box::new(Momentum::new(lr, 0.9)),
        OptimizerKind::AdamW => Box::new(AdamW::new(lr, 0.0)),
    }
}
