//! AdamW with decoupled weight decay and per-group learning rates.

use serde::{Deserialize, Serialize};

use super::{ParamGroup, ParamId, ParamStore, Scalar, Tensor};

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    bufs: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn new(store: &ParamStore<f32>) -> Self {
        Self {
            bufs: vec![None; store.len()],
        }
    }

    pub fn accumulate<T: Scalar>(&mut self, id: ParamId, grad: &Tensor<T>, scale: f32) {
        let buf = self.bufs[id.0].get_or_insert_with(|| vec![0.0; grad.numel()]);
        for (b, g) in buf.iter_mut().zip(grad.data()) {
            *b += g.as_f64() as f32 * scale;
        }
    }

    /// Adds another accumulator element-wise.
    pub fn merge(&mut self, other: &Gradients) {
        for (dst, src) in self.bufs.iter_mut().zip(&other.bufs) {
            if let Some(src) = src {
                let d = dst.get_or_insert_with(|| vec![0.0; src.len()]);
                for (a, b) in d.iter_mut().zip(src) {
                    *a += *b;
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.bufs[id.0].as_deref()
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flatten()
            .flat_map(|b| b.iter())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let k = (max_norm / norm) as f32;
            self.bufs
                .iter_mut()
                .flatten()
                .for_each(|b| b.iter_mut().for_each(|v| *v *= k));
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    state: Vec<Moments>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: store
                .entries()
                .iter()
                .map(|e| Moments {
                    step: 0,
                    m: vec![0.0; e.value.numel()],
                    v: vec![0.0; e.value.numel()],
                })
                .collect(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// One update. `lr` gives the learning rate for each group, or `None`
    /// to leave that group's parameters and moments untouched (frozen).
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &Gradients,
        lr: impl Fn(ParamGroup) -> Option<f64>,
    ) {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(lr) = lr(store.entry(id).group) else {
                continue;
            };
            let st = &mut self.state[id.0];
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            let grad = grads.get(id);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let g = grad.map_or(0.0, |g| f64::from(g[i]));
                let mut w = f64::from(p[i]);
                w -= lr * weight_decay * w;
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                w -= lr * mhat / (vhat.sqrt() + eps);
                p[i] = w as f32;
            }
        }
    }
}
