//! Adam with cosine learning-rate annealing, global-norm gradient
//! clipping, and an exponential moving average of the weights.

use crate::nn::ParamStore;
use crate::util::TensorData;
use crate::{Error, Result};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state. First/second moments are kept per parameter in
/// store index order.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.values().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let v = store.values().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self { cfg, m, v, t: 0 }
    }

    /// One update. Parameters with a None gradient are left untouched
    /// but still share the global step count for bias correction.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<ArrayD<f64>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            let mut p = store.get(id).clone();
            ndarray::Zip::from(&mut p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
                });
            store.set(id, p);
        }
    }

    pub fn to_state(&self) -> AdamState {
        AdamState {
            cfg: self.cfg.clone(),
            m: self.m.iter().map(TensorData::from_array).collect(),
            v: self.v.iter().map(TensorData::from_array).collect(),
            t: self.t,
        }
    }

    pub fn from_state(state: &AdamState, store: &ParamStore) -> Result<Self> {
        if state.m.len() != store.len() || state.v.len() != store.len() {
            return Err(Error::Container(
                "optimizer state does not match parameter count".into(),
            ));
        }
        let m = state.m.iter().map(|t| t.to_array()).collect::<Result<Vec<_>>>()?;
        let v = state.v.iter().map(|t| t.to_array()).collect::<Result<Vec<_>>>()?;
        for (a, p) in m.iter().zip(store.values()) {
            if a.shape() != p.shape() {
                return Err(Error::Container("optimizer moment shape mismatch".into()));
            }
        }
        Ok(Self {
            cfg: state.cfg.clone(),
            m,
            v,
            t: state.t,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub m: Vec<TensorData>,
    pub v: Vec<TensorData>,
    pub t: u64,
}

/// Cosine-annealed learning rate: linear warmup to `base` over `warmup`
/// iterations, then 0.5*base*(1+cos(pi*p)) down to zero at `total`.
pub fn cosine_lr(base: f64, warmup: usize, total: usize, iter: usize) -> f64 {
    assert!(total > 0, "schedule length must be positive");
    if warmup > 0 && iter < warmup {
        return base * (iter + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let p = ((iter - warmup) as f64 / span).clamp(0.0, 1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Scales gradients in place so their global L2 norm does not exceed
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<ArrayD<f64>>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Exponential moving average of the weights, updated after each
/// optimizer step and exported for sampling.
pub struct Ema {
    decay: f64,
    shadow: Vec<ArrayD<f64>>,
}

impl Ema {
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "EMA decay must be in [0, 1)");
        Self {
            decay,
            shadow: store.clone_values(),
        }
    }

    pub fn update(&mut self, store: &ParamStore) {
        for (s, p) in self.shadow.iter_mut().zip(store.values()) {
            ndarray::Zip::from(s).and(p).for_each(|s, &p| {
                *s = self.decay * *s + (1.0 - self.decay) * p;
            });
        }
    }

    pub fn shadow(&self) -> &[ArrayD<f64>] {
        &self.shadow
    }

    /// Copies the averaged weights into a store (typically a clone of
    /// the live model used for sampling or export).
    pub fn write_to(&self, store: &mut ParamStore) {
        store.assign_values(&self.shadow);
    }

    pub fn to_tensors(&self) -> Vec<TensorData> {
        self.shadow.iter().map(TensorData::from_array).collect()
    }

    pub fn from_tensors(tensors: &[TensorData], store: &ParamStore, decay: f64) -> Result<Self> {
        if tensors.len() != store.len() {
            return Err(Error::Container("EMA tensor count mismatch".into()));
        }
        let shadow = tensors
            .iter()
            .map(|t| t.to_array())
            .collect::<Result<Vec<_>>>()?;
        for (s, p) in shadow.iter().zip(store.values()) {
            if s.shape() != p.shape() {
                return Err(Error::Container("EMA shape mismatch".into()));
            }
        }
        Ok(Self { decay, shadow })
    }
}
