use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl MomentState {
    fn new(n: usize) -> Self {
        MomentState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Adam with decoupled weight decay. Moments and step counts are kept per
/// named tensor; weight decay applies only to tensors flagged as decaying.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    pub moments: BTreeMap<String, MomentState>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        AdamW {
            config,
            moments: BTreeMap::new(),
        }
    }

    /// Adds a step to every tensor of `params`, moments keyed by `prefix + name`.
    pub fn step(&mut self, prefix: &str, params: &mut dyn Parameters, grads: &dyn Parameters, lr: f64) {
        let mut flat: Vec<(String, Vec<f64>, bool)> = Vec::new();
        grads.visit(&mut |name, _, data, decays| flat.push((name.to_string(), data.to_vec(), decays)));
        let cfg = self.config;
        let moments = &mut self.moments;
        let mut next = flat.into_iter();
        params.visit_mut(&mut |name, data| {
            let (gname, g, decays) = next.next().expect("gradient has the same tensors");
            debug_assert_eq!(gname, name);
            let st = moments
                .entry(format!("{prefix}{name}"))
                .or_insert_with(|| MomentState::new(data.len()));
            st.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
            let wd = if decays { cfg.weight_decay } else { 0.0 };
            for (j, p) in data.iter_mut().enumerate() {
                st.m[j] = cfg.beta1 * st.m[j] + (1.0 - cfg.beta1) * g[j];
                st.v[j] = cfg.beta2 * st.v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mhat = st.m[j] / bc1;
                let vhat = st.v[j] / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + cfg.eps) + wd * *p);
            }
        });
    }
}
