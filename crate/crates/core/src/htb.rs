//! Head/tail balancing: a moving average of the fused-feature gradient biases
//! the head teacher one way and the tail teacher the other, and both teachers
//! are distilled into the balanced model with loss-proportional weights.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::losses::{focal_family_prob, sigmoid, Exponents};
use crate::netcore::{dot, norm, softmax_vec, NormalizedHead};

/// `e <- mu * e + sum(g)`, kept in feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingGradient {
    pub e: Vec<f64>,
    pub mu: f64,
}

impl MovingGradient {
    pub fn new(dim: usize, mu: f64) -> Self {
        MovingGradient {
            e: vec![0.0; dim],
            mu,
        }
    }

    pub fn update(&mut self, batch_feature_grad_sum: &[f64]) -> Result<()> {
        check_len("moving gradient", self.e.len(), batch_feature_grad_sum.len())?;
        for (e, g) in self.e.iter_mut().zip(batch_feature_grad_sum) {
            *e = self.mu * *e + g;
        }
        Ok(())
    }
}

pub fn update_moving_gradient(mg: &mut MovingGradient, batch_feature_grad_sum: &[f64]) -> Result<()> {
    mg.update(batch_feature_grad_sum)
}

/// Direction of the logit adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Teacher {
    /// Subtracts the moving vector.
    Head,
    /// Adds the moving vector.
    Tail,
}

impl Teacher {
    pub fn sign(self) -> f64 {
        match self {
            Teacher::Head => -1.0,
            Teacher::Tail => 1.0,
        }
    }
}

/// Intermediate values of [`adjust_logits`] needed for its backward pass.
#[derive(Debug, Clone)]
pub struct AdjustTape {
    /// `e` projected through the head without feature normalization.
    pub projected: Vec<f64>,
    /// Cosine similarity between the logits and `projected`.
    pub similarity: f64,
    sign: f64,
}

/// `z_hat_c = z_c + sign * s * u_c` with `u = head.project(e)` and
/// `s = cos(z, u)`. Zero-norm `z` or `u` gives `s = 0`.
pub fn adjust_logits(
    z: &[f64],
    teacher: Teacher,
    head: &NormalizedHead,
    mg: &MovingGradient,
) -> Result<(Vec<f64>, AdjustTape)> {
    check_len("adjust logits", head.num_classes(), z.len())?;
    check_len("adjust moving vector", head.feature_dim(), mg.e.len())?;
    let u = head.project(&mg.e);
    let (nz, nu) = (norm(z), norm(&u));
    let s = if nz > 0.0 && nu > 0.0 {
        dot(z, &u) / (nz * nu)
    } else {
        0.0
    };
    let sign = teacher.sign();
    let adjusted = z.iter().zip(&u).map(|(zc, uc)| zc + sign * s * uc).collect();
    Ok((
        adjusted,
        AdjustTape {
            projected: u,
            similarity: s,
            sign,
        },
    ))
}

/// Backward of [`adjust_logits`]. Accumulates head weight gradients and
/// returns the gradient w.r.t. the unadjusted logits. `e` is a constant.
pub fn adjust_backward(
    z: &[f64],
    tape: &AdjustTape,
    grad_adjusted: &[f64],
    head: &NormalizedHead,
    mg: &MovingGradient,
    grads: &mut NormalizedHead,
) -> Vec<f64> {
    let u = &tape.projected;
    let s = tape.similarity;
    let (nz, nu) = (norm(z), norm(u));
    let mut grad_z = grad_adjusted.to_vec();
    if nz == 0.0 || nu == 0.0 {
        return grad_z;
    }
    let gu_dot = dot(grad_adjusted, u);
    let k = tape.sign * gu_dot;
    let mut grad_u = vec![0.0; u.len()];
    for c in 0..z.len() {
        let ds_dz = u[c] / (nz * nu) - s * z[c] / (nz * nz);
        let ds_du = z[c] / (nz * nu) - s * u[c] / (nu * nu);
        grad_z[c] += k * ds_dz;
        grad_u[c] = tape.sign * s * grad_adjusted[c] + k * ds_du;
    }
    head.project_backward(&mg.e, &grad_u, grads);
    grad_z
}

/// Probability map applied to teacher and student logits before fusing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phi {
    Softmax,
    Sigmoid,
}

impl Phi {
    pub fn apply(self, z: &[f64]) -> Vec<f64> {
        match self {
            Phi::Softmax => softmax_vec(z),
            Phi::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
        }
    }

    fn backward(self, out: &[f64], grad_out: &[f64]) -> Vec<f64> {
        match self {
            Phi::Softmax => {
                let m = dot(out, grad_out);
                out.iter().zip(grad_out).map(|(a, g)| a * (g - m)).collect()
            }
            Phi::Sigmoid => out
                .iter()
                .zip(grad_out)
                .map(|(a, g)| g * a * (1.0 - a))
                .collect(),
        }
    }
}

/// One teacher's distillation term `L(phi(z_teacher) * phi(z_b))`, unweighted.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTerm {
    pub loss: f64,
    pub grad_teacher: Vec<f64>,
    pub grad_student: Vec<f64>,
}

pub fn teacher_term(
    z_teacher: &[f64],
    z_student: &[f64],
    targets: &[u8],
    exps: &Exponents,
    eps: f64,
    phi: Phi,
) -> Result<TeacherTerm> {
    check_len("teacher logits", z_student.len(), z_teacher.len())?;
    let a = phi.apply(z_teacher);
    let b = phi.apply(z_student);
    let p: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let lg = focal_family_prob(&p, targets, exps, eps)?;
    let grad_a: Vec<f64> = lg.grad.iter().zip(&b).map(|(g, y)| g * y).collect();
    let grad_b: Vec<f64> = lg.grad.iter().zip(&a).map(|(g, x)| g * x).collect();
    Ok(TeacherTerm {
        loss: lg.loss,
        grad_teacher: phi.backward(&a, &grad_a),
        grad_student: phi.backward(&b, &grad_b),
    })
}

/// `kappa_h = L_h^a / (L_h^a + L_t^a)`, `kappa_t = 1 - kappa_h`; both 0.5 when
/// the two losses vanish.
pub fn kappa(loss_head: f64, loss_tail: f64, alpha: f64) -> (f64, f64) {
    let kh = if loss_head <= 0.0 && loss_tail <= 0.0 {
        0.5
    } else if loss_head <= 0.0 {
        0.0
    } else if loss_tail <= 0.0 {
        1.0
    } else {
        1.0 / (1.0 + (loss_tail / loss_head).powf(alpha))
    };
    (kh, 1.0 - kh)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HtbConfig {
    pub alpha: f64,
    pub prob_clamp: f64,
    pub phi: Phi,
}

impl Default for HtbConfig {
    fn default() -> Self {
        HtbConfig {
            alpha: 2.0,
            prob_clamp: crate::losses::DEFAULT_PROB_CLAMP,
            phi: Phi::Softmax,
        }
    }
}

impl HtbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha", format!("{} must be > 0", self.alpha)));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.1) {
            return Err(Error::invalid("prob_clamp", "must lie in (0, 0.1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HtbOutput {
    pub loss: f64,
    pub loss_head: f64,
    pub loss_tail: f64,
    pub kappa_head: f64,
    pub kappa_tail: f64,
    pub grad_head: Vec<f64>,
    pub grad_tail: Vec<f64>,
    pub grad_balanced: Vec<f64>,
}

/// Distillation loss for one sample. `kappa_override` freezes the weights
/// (for finite-difference checks); otherwise they are computed from the two
/// teacher losses. Gradients never flow through kappa.
pub fn htb_loss(
    z_head_adj: &[f64],
    z_tail_adj: &[f64],
    z_balanced: &[f64],
    targets: &[u8],
    cfg: &HtbConfig,
    exps: &Exponents,
    kappa_override: Option<(f64, f64)>,
) -> Result<HtbOutput> {
    cfg.validate()?;
    let h = teacher_term(z_head_adj, z_balanced, targets, exps, cfg.prob_clamp, cfg.phi)?;
    let t = teacher_term(z_tail_adj, z_balanced, targets, exps, cfg.prob_clamp, cfg.phi)?;
    let (kh, kt) = kappa_override.unwrap_or_else(|| kappa(h.loss, t.loss, cfg.alpha));
    Ok(HtbOutput {
        loss: kh * h.loss + kt * t.loss,
        loss_head: h.loss,
        loss_tail: t.loss,
        kappa_head: kh,
        kappa_tail: kt,
        grad_head: h.grad_teacher.iter().map(|g| kh * g).collect(),
        grad_tail: t.grad_teacher.iter().map(|g| kt * g).collect(),
        grad_balanced: h
            .grad_student
            .iter()
            .zip(&t.grad_student)
            .map(|(a, b)| kh * a + kt * b)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn moving_gradient_recurrence() {
        let mut mg = MovingGradient::new(3, 0.9);
        mg.update(&[1.0, 0.0, 0.0]).unwrap();
        mg.update(&[1.0, 0.0, 0.0]).unwrap();
        assert!((mg.e[0] - 1.9).abs() < 1e-15);
        assert_eq!(&mg.e[1..], &[0.0, 0.0]);

        let mut mg = MovingGradient::new(2, 0.0);
        mg.update(&[3.0, 4.0]).unwrap();
        mg.update(&[-1.0, 2.0]).unwrap();
        assert_eq!(mg.e, vec![-1.0, 2.0]);

        let mut mg = MovingGradient::new(2, 0.9);
        for _ in 0..10 {
            mg.update(&[0.0, 0.0]).unwrap();
        }
        assert_eq!(mg.e, vec![0.0, 0.0]);
        assert!(mg.update(&[0.0]).is_err());
    }

    #[test]
    fn zero_moving_vector_leaves_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = NormalizedHead::new(3, 8, 2, 16.0, 1e-6, &mut rng).unwrap();
        let mg = MovingGradient::new(8, 0.9);
        let z = [0.3, -1.0, 2.0];
        for t in [Teacher::Head, Teacher::Tail] {
            assert_eq!(adjust_logits(&z, t, &head, &mg).unwrap().0, z.to_vec());
        }
    }

    #[test]
    fn kappa_values() {
        assert_eq!(kappa(1.3, 1.3, 0.5), (0.5, 0.5));
        let (kh, kt) = kappa(2.0, 1.0, 2.0);
        assert!((kh - 0.8).abs() < 1e-15 && (kt - 0.2).abs() < 1e-15);
        assert_eq!(kappa(0.0, 0.0, 2.0), (0.5, 0.5));
    }
}
