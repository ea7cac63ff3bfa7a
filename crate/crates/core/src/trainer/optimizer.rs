use serde::{Deserialize, Serialize};

use super::model::{ModelRole, TriModel};
use crate::netcore::ParamSet;

/// Adam moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &TriModel, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One bias-corrected update; `lr` maps each tensor's role to its rate.
    pub fn step(&mut self, model: &mut TriModel, grads: &TriModel, lr: impl Fn(ModelRole) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let roles = model.roles();
        let grads = grads.params();
        for (i, param) in model.params_mut().into_iter().enumerate() {
            let rate = lr(roles[i]);
            let (m, v, g) = (&mut self.first[i], &mut self.second[i], grads[i]);
            for j in 0..param.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                param[j] -= rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub(crate) fn matches(&self, model: &TriModel) -> bool {
        let p = model.params();
        p.len() == self.first.len()
            && p.len() == self.second.len()
            && p.iter()
                .zip(self.first.iter().zip(&self.second))
                .all(|(p, (m, v))| p.len() == m.len() && p.len() == v.len())
    }
}
