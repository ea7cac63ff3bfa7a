use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::htb::HtbConfig;
use crate::losses::{LossKind, MfmConfig};

/// Per-epoch learning-rate multipliers, one per model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub head: f64,
    pub balanced: f64,
    pub tail: f64,
}

impl Default for LrDecay {
    fn default() -> Self {
        LrDecay {
            head: 0.90,
            balanced: 0.97,
            tail: 1.00,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Hidden widths of each backbone (tanh).
    pub hidden: Vec<usize>,
    /// Backbone output width, consumed by the classifiers.
    pub feature_dim: usize,
    pub groups: usize,
    pub rho: f64,
    pub eta: f64,
    pub attention_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: vec![64],
            feature_dim: 64,
            groups: 4,
            rho: 16.0,
            eta: 1e-6,
            attention_hidden: 32,
        }
    }
}

/// Which model's probabilities drive label correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionSource {
    Balanced,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_c: f64,
    pub lambda_m: f64,
    pub lambda_b: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: LrDecay,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub tau: f64,
    /// Momentum of the running positive-confidence mean.
    pub stats_momentum: f64,
    pub warmup_epochs: usize,
    /// Decay of the moving gradient vector.
    pub mu: f64,
    pub loss: LossKind,
    pub mfm: MfmConfig,
    pub gamma_ht_scale: f64,
    pub htb: HtbConfig,
    pub arch: ArchConfig,
    pub use_rlc: bool,
    pub use_htb: bool,
    /// Re-derive the correction loss's head/tail factor from observed plus
    /// recalled counts (otherwise the static counts are used).
    pub dynamic_distribution: bool,
    /// Teachers also receive the classification term on their adjusted logits.
    pub teacher_mfm: bool,
    pub correction_source: CorrectionSource,
    /// Every `eval_period`-th sample is held out for evaluation.
    pub eval_period: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_c: 1.0,
            lambda_m: 1.0,
            lambda_b: 1.0,
            batch_size: 32,
            epochs: 40,
            learning_rate: 2e-3,
            lr_decay: LrDecay::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            tau: 0.7,
            stats_momentum: 0.99,
            warmup_epochs: 2,
            mu: 0.9,
            loss: LossKind::Mfm,
            mfm: MfmConfig::default(),
            gamma_ht_scale: 1.0,
            htb: HtbConfig::default(),
            arch: ArchConfig::default(),
            use_rlc: true,
            use_htb: true,
            dynamic_distribution: true,
            teacher_mfm: true,
            correction_source: CorrectionSource::Balanced,
            eval_period: 5,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Plain single-model BCE training: no correction, no balancing.
    pub fn bce_baseline() -> Self {
        TrainConfig {
            loss: LossKind::Bce,
            lambda_c: 0.0,
            lambda_b: 0.0,
            use_rlc: false,
            use_htb: false,
            ..TrainConfig::default()
        }
    }

    /// The weight actually applied to the correction term.
    pub fn effective_lambda_c(&self) -> f64 {
        if self.use_rlc {
            self.lambda_c
        } else {
            0.0
        }
    }

    /// The weight actually applied to the distillation term.
    pub fn effective_lambda_b(&self) -> f64 {
        if self.use_htb {
            self.lambda_b
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_m", self.lambda_m),
            ("lambda_b", self.lambda_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} must be finite and >= 0")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be finite and >= 0"));
        }
        for (name, v) in [
            ("lr_decay_head", self.lr_decay.head),
            ("lr_decay_balanced", self.lr_decay.balanced),
            ("lr_decay_tail", self.lr_decay.tail),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(name, format!("{v} is outside (0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps", "must be > 0"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid("tau", format!("{} is outside (0, 1)", self.tau)));
        }
        if !(0.0..1.0).contains(&self.stats_momentum) {
            return Err(Error::invalid("stats_momentum", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::invalid("mu", "must lie in [0, 1)"));
        }
        if !(self.gamma_ht_scale >= 0.0 && self.gamma_ht_scale.is_finite()) {
            return Err(Error::invalid("gamma_ht_scale", "must be finite and >= 0"));
        }
        match self.loss {
            LossKind::Focal { gamma } if !(gamma >= 0.0) => {
                return Err(Error::invalid("focal_gamma", "must be >= 0"))
            }
            LossKind::Asl {
                gamma_pos,
                gamma_neg,
            } if !(gamma_pos >= 0.0 && gamma_neg >= 0.0) => {
                return Err(Error::invalid("asl gammas", "must be >= 0"))
            }
            _ => {}
        }
        self.mfm.validate()?;
        self.htb.validate()?;
        let a = &self.arch;
        if a.feature_dim == 0 || a.groups == 0 || !a.feature_dim.is_multiple_of(a.groups) {
            return Err(Error::invalid(
                "groups",
                format!("feature_dim {} not divisible by {} groups", a.feature_dim, a.groups),
            ));
        }
        if a.hidden.contains(&0) || a.attention_hidden == 0 {
            return Err(Error::invalid("hidden", "widths must be positive"));
        }
        if self.eval_period < 2 {
            return Err(Error::invalid("eval_period", "must be >= 2"));
        }
        Ok(())
    }
}
