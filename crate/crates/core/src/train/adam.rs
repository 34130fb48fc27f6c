use std::collections::BTreeMap;

use crate::model::checkpoint::OptimizerState;
use crate::tensor::{ParamGrads, ParamRegistry};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_state(lr: f64, weight_decay: f64, state: &OptimizerState) -> Self {
        Self {
            lr,
            weight_decay,
            step: state.step,
            m: state.m.clone(),
            v: state.v.clone(),
        }
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update; parameters missing from `grads` get a zero gradient.
    pub fn update(&mut self, params: &mut ParamRegistry<f64>, grads: &ParamGrads<f64>) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (name, theta) in params.iter_mut() {
            let n = theta.len();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name);
            for (k, th) in theta.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let step = (m[k] / c1) / ((v[k] / c2).sqrt() + EPS) + self.weight_decay * *th;
                *th -= self.lr * step;
            }
        }
    }
}
