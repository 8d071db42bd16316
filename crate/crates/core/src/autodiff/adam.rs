use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments for every tensor of one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Weight decay is decoupled: parameters
    /// shrink by `lr * weight_decay * theta` before the moment update.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), TensorError> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                reason: format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            });
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (((id, m), v), g) in params
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
            .zip(grads.iter())
        {
            let theta = params.get_mut(id);
            if theta.shape() != g.shape() || theta.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: theta.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            for (((t, mi), vi), &gi) in theta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *t -= lr * weight_decay * *t;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *t -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
