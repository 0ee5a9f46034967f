use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Holds one pair of moment buffers per parameter
/// of the store it was created for.
///
/// Row-sparse parameters (embedding tables, codebooks) are updated lazily:
/// a row whose gradient is exactly zero keeps its value and moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value().shape()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(config: AdamConfig, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        Self { config, step, m, v }
    }

    /// Applies one update to every parameter in `store` from its gradient buffer.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "optimizer built for {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some(p) = store.params().iter().find(|p| p.grad().is_none()) {
            return Err(Error::Usage(format!("parameter `{}` has no gradient", p.name())));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let sparse = p.is_row_sparse();
            let (value, grad) = p.value_and_grad_mut();
            let grad = grad.expect("checked above");
            let cols = value.cols();
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = grad.data();
            let xd = value.data_mut();
            for (r, g_row) in gd.chunks(cols).enumerate() {
                if sparse && g_row.iter().all(|&g| g == 0.0) {
                    continue;
                }
                for (j, &g) in g_row.iter().enumerate() {
                    let i = r * cols + j;
                    md[i] = beta1 * md[i] + (1.0 - beta1) * g;
                    vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
                    let mh = md[i] / bc1;
                    let vh = vd[i] / bc2;
                    xd[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
