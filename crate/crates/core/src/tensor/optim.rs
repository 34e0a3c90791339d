use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self { config, state: AdamState { step: 0, m: zeros.clone(), v: zeros } }
    }

    /// One bias-corrected update of every parameter from its accumulated
    /// gradient (missing gradients count as zero), then clears the gradients.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.state.m.len() {
            return Err(TensorError::ShapeMismatch { op: "adam_step", left: vec![params.len()], right: vec![self.state.m.len()] });
        }
        for (k, p) in params.iter().enumerate() {
            if p.numel() != self.state.m[k].len() {
                return Err(TensorError::ShapeMismatch { op: "adam_step", left: p.shape().to_vec(), right: vec![self.state.m[k].len()] });
            }
        }
        self.state.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, p) in params.iter().enumerate() {
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let (m, v) = (&mut self.state.m[k], &mut self.state.v[k]);
            let mut data = p.data_mut();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            drop(data);
            p.zero_grad();
        }
        Ok(())
    }
}
