use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ArchConfig;
use crate::error::{Error, Result};
use crate::htb::{adjust_backward, adjust_logits, AdjustTape, MovingGradient, Teacher};
use crate::netcore::{AdditiveAttention, AttentionTape, Mlp, MlpTape, NormalizedHead, ParamSet};

/// A backbone and its classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub backbone: Mlp,
    pub head: NormalizedHead,
}

impl Branch {
    fn new<R: Rng + ?Sized>(
        input_dim: usize,
        num_classes: usize,
        arch: &ArchConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend(&arch.hidden);
        widths.push(arch.feature_dim);
        Ok(Branch {
            backbone: Mlp::new(&widths, rng)?,
            head: NormalizedHead::new(
                num_classes,
                arch.feature_dim,
                arch.groups,
                arch.rho,
                arch.eta,
                rng,
            )?,
        })
    }
}

impl ParamSet for Branch {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.backbone.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Which learning-rate schedule a parameter tensor follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Head,
    Tail,
    Balanced,
}

/// Head teacher, tail teacher and the balanced student with its attention
/// fusion block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriModel {
    pub head: Branch,
    pub tail: Branch,
    pub balanced: Branch,
    pub attention: AdditiveAttention,
}

impl TriModel {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        num_classes: usize,
        arch: &ArchConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TriModel {
            head: Branch::new(input_dim, num_classes, arch, rng)?,
            tail: Branch::new(input_dim, num_classes, arch, rng)?,
            balanced: Branch::new(input_dim, num_classes, arch, rng)?,
            attention: AdditiveAttention::new(arch.feature_dim, arch.attention_hidden, rng)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn input_dim(&self) -> usize {
        self.balanced.backbone.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.balanced.head.num_classes()
    }

    /// Schedule role of each tensor returned by `params()`.
    pub fn roles(&self) -> Vec<ModelRole> {
        let mut r = vec![ModelRole::Head; self.head.params().len()];
        r.extend(vec![ModelRole::Tail; self.tail.params().len()]);
        r.extend(vec![
            ModelRole::Balanced;
            self.balanced.params().len() + self.attention.params().len()
        ]);
        r
    }

    /// Check that tensor shapes are mutually consistent and match `arch`.
    pub(crate) fn validate_shapes(&self, input_dim: usize, num_classes: usize) -> Result<()> {
        let shape_err = |field: &str, reason: String| Error::Checkpoint {
            field: field.to_string(),
            reason,
        };
        for (name, b) in [
            ("model.head", &self.head),
            ("model.tail", &self.tail),
            ("model.balanced", &self.balanced),
        ] {
            if !b.backbone.shapes_ok() || !b.head.shapes_ok() {
                return Err(shape_err(name, "inconsistent tensor shapes".into()));
            }
            if b.backbone.input_dim() != input_dim {
                return Err(shape_err(
                    name,
                    format!("input dim {} != dataset d = {input_dim}", b.backbone.input_dim()),
                ));
            }
            if b.head.num_classes() != num_classes {
                return Err(shape_err(
                    name,
                    format!("{} classes != dataset C = {num_classes}", b.head.num_classes()),
                ));
            }
            if b.head.feature_dim() != b.backbone.output_dim() {
                return Err(shape_err(name, "head/backbone width mismatch".into()));
            }
        }
        if !self.attention.shapes_ok() || self.attention.dim() != self.balanced.head.feature_dim() {
            return Err(shape_err("model.attention", "inconsistent tensor shapes".into()));
        }
        Ok(())
    }

    /// Forward pass for one sample. With `tri = false` only the balanced
    /// branch runs and no fusion happens.
    pub fn forward(&self, x: &[f64], mg: &MovingGradient, tri: bool) -> Result<SampleTrace> {
        let (f_hat, tape_b) = self.balanced.backbone.forward(x)?;
        if !tri {
            let z_b = self.balanced.head.forward(&f_hat)?;
            return Ok(SampleTrace {
                f_b: f_hat.clone(),
                f_hat,
                tape_b,
                z_b,
                teachers: None,
            });
        }
        let (f_h, tape_h) = self.head.backbone.forward(x)?;
        let (f_t, tape_t) = self.tail.backbone.forward(x)?;
        let (f_b, att) = self.attention.forward(&f_hat, &[&f_h, &f_t])?;
        let z_b = self.balanced.head.forward(&f_b)?;
        let z_h = self.head.head.forward(&f_h)?;
        let z_t = self.tail.head.forward(&f_t)?;
        let (zh_adj, adj_h) = adjust_logits(&z_h, Teacher::Head, &self.head.head, mg)?;
        let (zt_adj, adj_t) = adjust_logits(&z_t, Teacher::Tail, &self.tail.head, mg)?;
        Ok(SampleTrace {
            f_hat,
            f_b,
            tape_b,
            z_b,
            teachers: Some(TeacherTrace {
                f_h,
                f_t,
                tape_h,
                tape_t,
                att,
                z_h,
                z_t,
                zh_adj,
                zt_adj,
                adj_h,
                adj_t,
            }),
        })
    }

    /// Backward pass for one sample given logit gradients. Returns the
    /// gradient at the fused balanced feature.
    pub fn backward(
        &self,
        x_trace: &SampleTrace,
        grad_zb: &[f64],
        grad_teachers: Option<(&[f64], &[f64])>,
        mg: &MovingGradient,
        grads: &mut TriModel,
    ) -> Vec<f64> {
        let grad_fb =
            self.balanced
                .head
                .backward(&x_trace.f_b, &x_trace.z_b, grad_zb, &mut grads.balanced.head);
        let Some(t) = &x_trace.teachers else {
            self.balanced
                .backbone
                .backward(&x_trace.tape_b, &grad_fb, &mut grads.balanced.backbone);
            return grad_fb;
        };
        let (g_zh_adj, g_zt_adj) = grad_teachers.expect("teacher gradients in tri mode");
        let g_zh = adjust_backward(&t.z_h, &t.adj_h, g_zh_adj, &self.head.head, mg, &mut grads.head.head);
        let g_zt = adjust_backward(&t.z_t, &t.adj_t, g_zt_adj, &self.tail.head, mg, &mut grads.tail.head);
        let mut g_fh = self.head.head.backward(&t.f_h, &t.z_h, &g_zh, &mut grads.head.head);
        let mut g_ft = self.tail.head.backward(&t.f_t, &t.z_t, &g_zt, &mut grads.tail.head);
        let (g_fhat, g_keys) = self.attention.backward(
            &x_trace.f_hat,
            &[&t.f_h, &t.f_t],
            &t.att,
            &grad_fb,
            &mut grads.attention,
        );
        for (a, b) in g_fh.iter_mut().zip(&g_keys[0]) {
            *a += b;
        }
        for (a, b) in g_ft.iter_mut().zip(&g_keys[1]) {
            *a += b;
        }
        self.head.backbone.backward(&t.tape_h, &g_fh, &mut grads.head.backbone);
        self.tail.backbone.backward(&t.tape_t, &g_ft, &mut grads.tail.backbone);
        self.balanced
            .backbone
            .backward(&x_trace.tape_b, &g_fhat, &mut grads.balanced.backbone);
        grad_fb
    }
}

impl ParamSet for TriModel {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.head.params();
        p.extend(self.tail.params());
        p.extend(self.balanced.params());
        p.extend(self.attention.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.head.params_mut();
        p.extend(self.tail.params_mut());
        p.extend(self.balanced.params_mut());
        p.extend(self.attention.params_mut());
        p
    }
}

#[derive(Debug, Clone)]
pub struct TeacherTrace {
    pub f_h: Vec<f64>,
    pub f_t: Vec<f64>,
    tape_h: MlpTape,
    tape_t: MlpTape,
    att: AttentionTape,
    pub z_h: Vec<f64>,
    pub z_t: Vec<f64>,
    pub zh_adj: Vec<f64>,
    pub zt_adj: Vec<f64>,
    adj_h: AdjustTape,
    adj_t: AdjustTape,
}

impl TeacherTrace {
    pub fn attention_weights(&self) -> &[f64] {
        &self.att.weights
    }
}

/// Everything recorded by one sample's forward pass.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub f_hat: Vec<f64>,
    pub f_b: Vec<f64>,
    tape_b: MlpTape,
    pub z_b: Vec<f64>,
    pub teachers: Option<TeacherTrace>,
}
