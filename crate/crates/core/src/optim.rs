use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per
/// parameter; frozen parameters are skipped.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, ..Adam::default() }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Apply one update from the stored gradients, then zero them.
    pub fn step(&mut self, params: &mut ParamStore, learning_rate: f64) -> Result<()> {
        let n = params.len();
        if self.first.len() < n {
            self.first.resize(n, Vec::new());
            self.second.resize(n, Vec::new());
            self.steps.resize(n, 0);
        }
        let ids: Vec<_> = params.ids().filter(|id| params.is_trainable(*id)).collect();
        for id in &ids {
            if params.tensor(*id).grad().is_none() {
                return Err(Error::Contract(format!("parameter {} has no gradient", params.name(*id))));
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for id in ids {
            let t = params.tensor_mut(id);
            let grad = t.grad().expect("checked above").to_vec();
            let i = id.0;
            if self.first[i].is_empty() {
                self.first[i] = vec![0.0; grad.len()];
                self.second[i] = vec![0.0; grad.len()];
            }
            self.steps[i] += 1;
            let step = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(step);
            let c2 = 1.0 - beta2.powi(step);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= learning_rate * mhat / (vhat.sqrt() + eps);
            }
            t.zero_grad();
        }
        params.bump_step();
        Ok(())
    }
}
