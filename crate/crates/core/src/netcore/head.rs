use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{dot, norm, xavier_uniform, Matrix, ParamSet};
use crate::error::{check_len, Error, Result};

/// Cosine classifier split into `groups` channel groups:
///
/// `z_c = (rho / G) * sum_k <w_kc, f_k> / ((|w_kc| + eta) * |f|)`
///
/// where `f_k` is the k-th slice of the feature vector and `|f|` is the norm
/// of the whole vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedHead {
    pub groups: usize,
    pub rho: f64,
    pub eta: f64,
    /// One row per class, `feature_dim` columns.
    pub weight: Matrix,
}

// Guards the division by |f| for an all-zero feature vector.
const MIN_FEATURE_NORM: f64 = 1e-12;

impl NormalizedHead {
    pub fn new<R: Rng + ?Sized>(
        num_classes: usize,
        feature_dim: usize,
        groups: usize,
        rho: f64,
        eta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 || !feature_dim.is_multiple_of(groups) {
            return Err(Error::invalid(
                "groups",
                format!("feature dim {feature_dim} is not divisible by {groups} groups"),
            ));
        }
        if num_classes == 0 {
            return Err(Error::invalid("C", "need at least one class"));
        }
        if !(eta >= 0.0) {
            return Err(Error::invalid("eta", format!("{eta} must be >= 0")));
        }
        Ok(NormalizedHead {
            groups,
            rho,
            eta,
            weight: xavier_uniform(rng, num_classes, feature_dim),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols
    }

    fn group_width(&self) -> usize {
        self.weight.cols / self.groups
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// Un-normalized projection `u_c = (rho / G) * sum_k <w_kc, v_k> / (|w_kc| + eta)`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let gw = self.group_width();
        let scale = self.rho / self.groups as f64;
        (0..self.num_classes())
            .map(|c| {
                let row = self.weight.row(c);
                let mut acc = 0.0;
                for k in 0..self.groups {
                    let w = &row[k * gw..(k + 1) * gw];
                    acc += dot(w, &v[k * gw..(k + 1) * gw]) / (norm(w) + self.eta);
                }
                scale * acc
            })
            .collect()
    }

    /// Backward of [`project`](Self::project): accumulates into `grads.weight`
    /// and returns the gradient w.r.t. `v`.
    pub fn project_backward(&self, v: &[f64], grad_u: &[f64], grads: &mut NormalizedHead) -> Vec<f64> {
        let gw = self.group_width();
        let scale = self.rho / self.groups as f64;
        let mut grad_v = vec![0.0; v.len()];
        for (c, &gu) in grad_u.iter().enumerate() {
            if gu == 0.0 {
                continue;
            }
            let row = self.weight.row(c);
            let grow = grads.weight.row_mut(c);
            for k in 0..self.groups {
                let span = k * gw..(k + 1) * gw;
                let w = &row[span.clone()];
                let vk = &v[span.clone()];
                let nw = norm(w);
                let den = nw + self.eta;
                let a = dot(w, vk);
                let g = scale * gu;
                for j in 0..gw {
                    grad_v[k * gw + j] += g * w[j] / den;
                    let mut dw = vk[j] / den;
                    if nw > 0.0 {
                        dw -= a * w[j] / (den * den * nw);
                    }
                    grow[k * gw + j] += g * dw;
                }
            }
        }
        grad_v
    }

    pub fn forward(&self, f: &[f64]) -> Result<Vec<f64>> {
        check_len("head input", self.feature_dim(), f.len())?;
        let nf = norm(f).max(MIN_FEATURE_NORM);
        Ok(self.project(f).into_iter().map(|u| u / nf).collect())
    }

    /// Backward of [`forward`](Self::forward) given the logits it produced.
    pub fn backward(&self, f: &[f64], logits: &[f64], grad_z: &[f64], grads: &mut NormalizedHead) -> Vec<f64> {
        let nf = norm(f).max(MIN_FEATURE_NORM);
        let scaled: Vec<f64> = grad_z.iter().map(|g| g / nf).collect();
        let mut grad_f = self.project_backward(f, &scaled, grads);
        let gz = dot(grad_z, logits) / (nf * nf);
        for (gf, fv) in grad_f.iter_mut().zip(f) {
            *gf -= gz * fv;
        }
        grad_f
    }

    pub(crate) fn shapes_ok(&self) -> bool {
        self.weight.shape_ok() && self.groups > 0 && self.weight.cols.is_multiple_of(self.groups)
    }
}

impl ParamSet for NormalizedHead {
    fn params(&self) -> Vec<&[f64]> {
        vec![self.weight.data.as_slice()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data.as_mut_slice()]
    }
}
