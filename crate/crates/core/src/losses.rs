//! Imbalance-aware multi-label losses.
//!
//! Every loss here is a per-class sum of focal-style terms
//!
//! ```text
//! positive: (1 - p)^g+ * -ln(p)
//! negative:  p^g-      * -ln(1 - p)
//! ```
//!
//! and differs only in how the exponents `g+`/`g-` are chosen per class.
//! BCE uses 0/0, focal uses g/g, the asymmetric variant uses separate
//! constants, and the multi-focal modifier (MFM) adds a per-class head/tail
//! offset on top of the asymmetric pair.
//!
//! Probabilities are clamped to `[eps, 1 - eps]` before `ln`/`pow`; outside the
//! clamp the derivative is zero.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const DEFAULT_PROB_CLAMP: f64 = 1e-6;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Scalar loss with its gradient (w.r.t. logits or probabilities, depending on
/// the function that produced it).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Exponents of the positive and negative terms, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Exponents {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

impl Exponents {
    pub fn uniform(num_classes: usize, pos: f64, neg: f64) -> Self {
        Exponents {
            pos: vec![pos; num_classes],
            neg: vec![neg; num_classes],
        }
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }
}

/// Positive-side term `(1-p)^g * -ln p` and its derivative in `p`.
#[inline]
pub fn positive_term(p: f64, gamma: f64) -> (f64, f64) {
    let q = 1.0 - p;
    let w = q.powf(gamma);
    let nll = -p.ln();
    let dw = if gamma == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) };
    (w * nll, dw * nll - w / p)
}

/// Negative-side term `p^g * -ln(1-p)` and its derivative in `p`.
#[inline]
pub fn negative_term(p: f64, gamma: f64) -> (f64, f64) {
    let q = 1.0 - p;
    let w = p.powf(gamma);
    let nll = -q.ln();
    let dw = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
    (w * nll, dw * nll + w / q)
}

/// Focal-family loss on probabilities, with the gradient w.r.t. the raw
/// (unclamped) probabilities.
pub fn focal_family_prob(p: &[f64], y: &[u8], exps: &Exponents, eps: f64) -> Result<LossGrad> {
    check_len("loss targets", p.len(), y.len())?;
    check_len("loss exponents", p.len(), exps.len())?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for c in 0..p.len() {
        let raw = p[c];
        let pc = raw.clamp(eps, 1.0 - eps);
        let (l, d) = if y[c] == 1 {
            positive_term(pc, exps.pos[c])
        } else {
            negative_term(pc, exps.neg[c])
        };
        loss += l;
        if (eps..=1.0 - eps).contains(&raw) {
            grad[c] = d;
        }
    }
    Ok(LossGrad { loss, grad })
}

/// Focal-family loss on probabilities `p = sigmoid(z)`, gradient w.r.t. `z`.
pub fn focal_family(p: &[f64], y: &[u8], exps: &Exponents, eps: f64) -> Result<LossGrad> {
    let mut out = focal_family_prob(p, y, exps, eps)?;
    for (g, &pc) in out.grad.iter_mut().zip(p) {
        *g *= pc * (1.0 - pc);
    }
    Ok(out)
}

fn check_gamma(name: &'static str, g: f64) -> Result<()> {
    if !(g >= 0.0 && g.is_finite()) {
        return Err(Error::invalid(name, format!("{g} must be finite and >= 0")));
    }
    Ok(())
}

pub fn bce(p: &[f64], y: &[u8]) -> Result<LossGrad> {
    focal_family(p, y, &Exponents::uniform(p.len(), 0.0, 0.0), DEFAULT_PROB_CLAMP)
}

pub fn focal(p: &[f64], y: &[u8], gamma: f64) -> Result<LossGrad> {
    check_gamma("gamma", gamma)?;
    focal_family(p, y, &Exponents::uniform(p.len(), gamma, gamma), DEFAULT_PROB_CLAMP)
}

/// Asymmetric focal loss with separate positive/negative exponents.
pub fn asl(p: &[f64], y: &[u8], gamma_pos: f64, gamma_neg: f64) -> Result<LossGrad> {
    check_gamma("gamma_pos", gamma_pos)?;
    check_gamma("gamma_neg", gamma_neg)?;
    focal_family(
        p,
        y,
        &Exponents::uniform(p.len(), gamma_pos, gamma_neg),
        DEFAULT_PROB_CLAMP,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfmConfig {
    pub gamma_pn_pos: f64,
    pub gamma_pn_neg: f64,
    pub w_pos: f64,
    pub w_neg: f64,
    pub prob_clamp: f64,
}

impl Default for MfmConfig {
    fn default() -> Self {
        MfmConfig {
            gamma_pn_pos: 1.0,
            gamma_pn_neg: 4.0,
            w_pos: -0.5,
            w_neg: 1.0,
            prob_clamp: DEFAULT_PROB_CLAMP,
        }
    }
}

impl MfmConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma("gamma_pn_pos", self.gamma_pn_pos)?;
        check_gamma("gamma_pn_neg", self.gamma_pn_neg)?;
        if self.gamma_pn_neg < self.gamma_pn_pos {
            return Err(Error::invalid(
                "gamma_pn_neg",
                format!(
                    "{} must be >= gamma_pn_pos = {}",
                    self.gamma_pn_neg, self.gamma_pn_pos
                ),
            ));
        }
        if !(self.w_pos.is_finite() && self.w_neg.is_finite()) {
            return Err(Error::invalid("w_pos/w_neg", "must be finite"));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.1) {
            return Err(Error::invalid(
                "prob_clamp",
                format!("{} is outside (0, 0.1)", self.prob_clamp),
            ));
        }
        Ok(())
    }

    /// Per-class exponents: `max(0, g_pn + w * g_ht[c])` on each side.
    pub fn exponents(&self, ht: &HeadTailFactor) -> Exponents {
        Exponents {
            pos: ht
                .gamma_ht
                .iter()
                .map(|&h| (self.gamma_pn_pos + self.w_pos * h).max(0.0))
                .collect(),
            neg: ht
                .gamma_ht
                .iter()
                .map(|&h| (self.gamma_pn_neg + self.w_neg * h).max(0.0))
                .collect(),
        }
    }
}

/// Per-class head/tail focal factor, >= 1 and larger for rarer classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTailFactor {
    pub gamma_ht: Vec<f64>,
}

impl HeadTailFactor {
    pub fn ones(num_classes: usize) -> Self {
        HeadTailFactor {
            gamma_ht: vec![1.0; num_classes],
        }
    }

    pub fn len(&self) -> usize {
        self.gamma_ht.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma_ht.is_empty()
    }
}

/// `g_ht[c] = 1 + scale * (1 - count[c] / max(count))`.
pub fn compute_gamma_ht(class_counts: &[usize], scale: f64) -> Result<HeadTailFactor> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::invalid("scale", format!("{scale} must be finite and >= 0")));
    }
    let max = class_counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::invalid("class_counts", "all class counts are zero"));
    }
    let max = max as f64;
    Ok(HeadTailFactor {
        gamma_ht: class_counts
            .iter()
            .map(|&c| 1.0 + scale * (1.0 - c as f64 / max))
            .collect(),
    })
}

/// Multi-focal modifier loss, gradient w.r.t. logits.
pub fn mfm(p: &[f64], y: &[u8], cfg: &MfmConfig, ht: &HeadTailFactor) -> Result<LossGrad> {
    cfg.validate()?;
    check_len("head-tail factor", p.len(), ht.len())?;
    focal_family(p, y, &cfg.exponents(ht), cfg.prob_clamp)
}

/// Multi-focal modifier loss, gradient w.r.t. the probabilities themselves.
pub fn mfm_prob(p: &[f64], y: &[u8], cfg: &MfmConfig, ht: &HeadTailFactor) -> Result<LossGrad> {
    cfg.validate()?;
    check_len("head-tail factor", p.len(), ht.len())?;
    focal_family_prob(p, y, &cfg.exponents(ht), cfg.prob_clamp)
}

/// Which classification loss a training term uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Focal { gamma: f64 },
    Asl { gamma_pos: f64, gamma_neg: f64 },
    Mfm,
}

impl LossKind {
    /// Resolve per-class exponents. `ht` is only consulted by [`LossKind::Mfm`].
    pub fn exponents(&self, cfg: &MfmConfig, ht: &HeadTailFactor) -> Exponents {
        let n = ht.len();
        match *self {
            LossKind::Bce => Exponents::uniform(n, 0.0, 0.0),
            LossKind::Focal { gamma } => Exponents::uniform(n, gamma, gamma),
            LossKind::Asl {
                gamma_pos,
                gamma_neg,
            } => Exponents::uniform(n, gamma_pos, gamma_neg),
            LossKind::Mfm => cfg.exponents(ht),
        }
    }
}
