use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{dot, xavier_uniform, Matrix, ParamSet};
use crate::error::{check_len, Error, Result};

/// Additive (Bahdanau-style) attention with a residual query connection:
///
/// `s_j = v . tanh(Wq q + Wk k_j)`, `a = softmax(s)`, `out = sum_j a_j k_j + q`.
///
/// Keys double as values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveAttention {
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub score: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionTape {
    hidden: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl AdditiveAttention {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::invalid("attention", "dimensions must be positive"));
        }
        let score = xavier_uniform(rng, hidden, 1).data;
        Ok(AdditiveAttention {
            w_query: xavier_uniform(rng, hidden, dim),
            w_key: xavier_uniform(rng, hidden, dim),
            score,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_query.cols
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn forward(&self, query: &[f64], keys: &[&[f64]]) -> Result<(Vec<f64>, AttentionTape)> {
        let d = self.dim();
        check_len("attention query", d, query.len())?;
        if keys.is_empty() {
            return Err(Error::invalid("keys", "need at least one key"));
        }
        for k in keys {
            check_len("attention key", d, k.len())?;
        }
        let qp = self.w_query.matvec(query);
        let mut hidden = Vec::with_capacity(keys.len());
        let mut scores = Vec::with_capacity(keys.len());
        for k in keys {
            let h: Vec<f64> = self
                .w_key
                .matvec(k)
                .iter()
                .zip(&qp)
                .map(|(a, b)| (a + b).tanh())
                .collect();
            scores.push(dot(&self.score, &h));
            hidden.push(h);
        }
        let weights = softmax(&scores);
        let mut out = query.to_vec();
        for (a, k) in weights.iter().zip(keys) {
            for (o, kv) in out.iter_mut().zip(k.iter()) {
                *o += a * kv;
            }
        }
        Ok((out, AttentionTape { hidden, weights }))
    }

    /// Returns `(grad_query, grad_keys)` and accumulates parameter gradients.
    pub fn backward(
        &self,
        query: &[f64],
        keys: &[&[f64]],
        tape: &AttentionTape,
        grad_out: &[f64],
        grads: &mut AdditiveAttention,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut grad_q = grad_out.to_vec();
        let mut grad_keys: Vec<Vec<f64>> = tape
            .weights
            .iter()
            .map(|a| grad_out.iter().map(|g| a * g).collect())
            .collect();
        let grad_a: Vec<f64> = keys.iter().map(|k| dot(grad_out, k)).collect();
        let mean = dot(&tape.weights, &grad_a);
        for (j, k) in keys.iter().enumerate() {
            let grad_s = tape.weights[j] * (grad_a[j] - mean);
            if grad_s == 0.0 {
                continue;
            }
            let h = &tape.hidden[j];
            let grad_pre: Vec<f64> = h
                .iter()
                .zip(&self.score)
                .map(|(hv, sv)| grad_s * sv * (1.0 - hv * hv))
                .collect();
            for (gs, hv) in grads.score.iter_mut().zip(h) {
                *gs += grad_s * hv;
            }
            grads.w_query.add_outer(&grad_pre, query);
            grads.w_key.add_outer(&grad_pre, k);
            for (g, v) in grad_q.iter_mut().zip(self.w_query.matvec_t(&grad_pre)) {
                *g += v;
            }
            for (g, v) in grad_keys[j].iter_mut().zip(self.w_key.matvec_t(&grad_pre)) {
                *g += v;
            }
        }
        (grad_q, grad_keys)
    }

    pub(crate) fn shapes_ok(&self) -> bool {
        self.w_query.shape_ok()
            && self.w_key.shape_ok()
            && self.w_query.rows == self.w_key.rows
            && self.w_query.cols == self.w_key.cols
            && self.score.len() == self.w_query.rows
    }
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl ParamSet for AdditiveAttention {
    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.w_query.data.as_slice(),
            self.w_key.data.as_slice(),
            self.score.as_slice(),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_query.data.as_mut_slice(),
            self.w_key.data.as_mut_slice(),
            self.score.as_mut_slice(),
        ]
    }
}
