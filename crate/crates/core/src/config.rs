//! Flat `key = value` run configuration.
//!
//! One file describes a whole experiment: the synthetic dataset, the training
//! hyper-parameters and the checkpoint cadence. Blank lines and `#` comments
//! are ignored; unknown keys are rejected. Command-line overrides go through
//! [`RunConfig::set`] after the file is applied.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{generate_synthetic, mask_labels, Dataset, SyntheticParams};
use crate::error::{Error, Result};
use crate::htb::Phi;
use crate::losses::LossKind;
use crate::trainer::{CorrectionSource, TrainConfig};

/// Synthetic dataset parameters. The defaults are the reference dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub n_max: usize,
    pub decay: f64,
    pub noise: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 20,
            dim: 32,
            n_max: 900,
            decay: 0.8,
            noise: 0.3,
            missing_rate: 0.4,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn synthetic_params(&self) -> SyntheticParams {
        SyntheticParams {
            num_classes: self.classes,
            feature_dim: self.dim,
            n_max: self.n_max,
            decay: self.decay,
            noise: self.noise,
            seed: self.seed,
        }
    }

    /// Generate and mask the dataset these parameters describe.
    pub fn build(&self) -> Result<Dataset> {
        let full = generate_synthetic(&self.synthetic_params())?;
        mask_labels(&full, self.missing_rate, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Loss parameters kept even when another loss is selected, so the
    /// resolved text round-trips.
    pub focal_gamma: f64,
    pub asl_gamma_pos: f64,
    pub asl_gamma_neg: f64,
    /// Write a checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            focal_gamma: 2.0,
            asl_gamma_pos: 0.0,
            asl_gamma_neg: 4.0,
            checkpoint_every: 10,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected a boolean, got `{value}`"))),
    }
}

fn loss_name(kind: &LossKind) -> &'static str {
    match kind {
        LossKind::Bce => "bce",
        LossKind::Focal { .. } => "focal",
        LossKind::Asl { .. } => "asl",
        LossKind::Mfm => "mfm",
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data_classes",
        "data_dim",
        "data_n_max",
        "data_decay",
        "data_noise",
        "data_missing_rate",
        "data_seed",
        "lambda_c",
        "lambda_m",
        "lambda_b",
        "batch_size",
        "epochs",
        "learning_rate",
        "lr_decay_head",
        "lr_decay_balanced",
        "lr_decay_tail",
        "beta1",
        "beta2",
        "adam_eps",
        "tau",
        "stats_momentum",
        "warmup_epochs",
        "mu",
        "loss",
        "focal_gamma",
        "asl_gamma_pos",
        "asl_gamma_neg",
        "gamma_pn_pos",
        "gamma_pn_neg",
        "w_pos",
        "w_neg",
        "prob_clamp",
        "gamma_ht_scale",
        "htb_alpha",
        "htb_prob_clamp",
        "htb_phi",
        "hidden",
        "feature_dim",
        "groups",
        "rho",
        "eta",
        "attention_hidden",
        "use_rlc",
        "use_htb",
        "dynamic_distribution",
        "teacher_mfm",
        "correction_source",
        "eval_period",
        "seed",
        "checkpoint_every",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Apply every `key = value` line of `text` on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "data_classes" => d.classes = num(key, value)?,
            "data_dim" => d.dim = num(key, value)?,
            "data_n_max" => d.n_max = num(key, value)?,
            "data_decay" => d.decay = num(key, value)?,
            "data_noise" => d.noise = num(key, value)?,
            "data_missing_rate" => d.missing_rate = num(key, value)?,
            "data_seed" => d.seed = num(key, value)?,
            "lambda_c" => t.lambda_c = num(key, value)?,
            "lambda_m" => t.lambda_m = num(key, value)?,
            "lambda_b" => t.lambda_b = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "lr_decay_head" => t.lr_decay.head = num(key, value)?,
            "lr_decay_balanced" => t.lr_decay.balanced = num(key, value)?,
            "lr_decay_tail" => t.lr_decay.tail = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "tau" => t.tau = num(key, value)?,
            "stats_momentum" => t.stats_momentum = num(key, value)?,
            "warmup_epochs" => t.warmup_epochs = num(key, value)?,
            "mu" => t.mu = num(key, value)?,
            "loss" => {
                t.loss = match value {
                    "bce" => LossKind::Bce,
                    "focal" => LossKind::Focal { gamma: 0.0 },
                    "asl" => LossKind::Asl {
                        gamma_pos: 0.0,
                        gamma_neg: 0.0,
                    },
                    "mfm" => LossKind::Mfm,
                    _ => {
                        return Err(Error::Config(format!(
                            "key `loss`: expected bce|focal|asl|mfm, got `{value}`"
                        )))
                    }
                }
            }
            "focal_gamma" => self.focal_gamma = num(key, value)?,
            "asl_gamma_pos" => self.asl_gamma_pos = num(key, value)?,
            "asl_gamma_neg" => self.asl_gamma_neg = num(key, value)?,
            "gamma_pn_pos" => t.mfm.gamma_pn_pos = num(key, value)?,
            "gamma_pn_neg" => t.mfm.gamma_pn_neg = num(key, value)?,
            "w_pos" => t.mfm.w_pos = num(key, value)?,
            "w_neg" => t.mfm.w_neg = num(key, value)?,
            "prob_clamp" => t.mfm.prob_clamp = num(key, value)?,
            "gamma_ht_scale" => t.gamma_ht_scale = num(key, value)?,
            "htb_alpha" => t.htb.alpha = num(key, value)?,
            "htb_prob_clamp" => t.htb.prob_clamp = num(key, value)?,
            "htb_phi" => {
                t.htb.phi = match value {
                    "softmax" => Phi::Softmax,
                    "sigmoid" => Phi::Sigmoid,
                    _ => {
                        return Err(Error::Config(format!(
                            "key `htb_phi`: expected softmax|sigmoid, got `{value}`"
                        )))
                    }
                }
            }
            "hidden" => {
                t.arch.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| num(key, w.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "feature_dim" => t.arch.feature_dim = num(key, value)?,
            "groups" => t.arch.groups = num(key, value)?,
            "rho" => t.arch.rho = num(key, value)?,
            "eta" => t.arch.eta = num(key, value)?,
            "attention_hidden" => t.arch.attention_hidden = num(key, value)?,
            "use_rlc" => t.use_rlc = flag(key, value)?,
            "use_htb" => t.use_htb = flag(key, value)?,
            "dynamic_distribution" => t.dynamic_distribution = flag(key, value)?,
            "teacher_mfm" => t.teacher_mfm = flag(key, value)?,
            "correction_source" => {
                t.correction_source = match value {
                    "balanced" => CorrectionSource::Balanced,
                    "head" => CorrectionSource::Head,
                    _ => {
                        return Err(Error::Config(format!(
                            "key `correction_source`: expected balanced|head, got `{value}`"
                        )))
                    }
                }
            }
            "eval_period" => t.eval_period = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        self.sync_loss();
        Ok(())
    }

    fn sync_loss(&mut self) {
        self.train.loss = match self.train.loss {
            LossKind::Focal { .. } => LossKind::Focal {
                gamma: self.focal_gamma,
            },
            LossKind::Asl { .. } => LossKind::Asl {
                gamma_pos: self.asl_gamma_pos,
                gamma_neg: self.asl_gamma_neg,
            },
            other => other,
        };
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let d = &self.data;
        if !(0.0..1.0).contains(&d.missing_rate) {
            return Err(Error::invalid(
                "data_missing_rate",
                format!("{} is outside [0, 1)", d.missing_rate),
            ));
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return Err(Error::invalid("data_noise", "must be finite and >= 0"));
        }
        if d.dim == 0 {
            return Err(Error::invalid("data_dim", "must be >= 1"));
        }
        Ok(())
    }

    /// Every key with its resolved value; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &self.data;
        let hidden: Vec<String> = t.arch.hidden.iter().map(|w| w.to_string()).collect();
        let phi = match t.htb.phi {
            Phi::Softmax => "softmax",
            Phi::Sigmoid => "sigmoid",
        };
        let source = match t.correction_source {
            CorrectionSource::Balanced => "balanced",
            CorrectionSource::Head => "head",
        };
        let values: Vec<String> = vec![
            d.classes.to_string(),
            d.dim.to_string(),
            d.n_max.to_string(),
            d.decay.to_string(),
            d.noise.to_string(),
            d.missing_rate.to_string(),
            d.seed.to_string(),
            t.lambda_c.to_string(),
            t.lambda_m.to_string(),
            t.lambda_b.to_string(),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            t.learning_rate.to_string(),
            t.lr_decay.head.to_string(),
            t.lr_decay.balanced.to_string(),
            t.lr_decay.tail.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.adam_eps.to_string(),
            t.tau.to_string(),
            t.stats_momentum.to_string(),
            t.warmup_epochs.to_string(),
            t.mu.to_string(),
            loss_name(&t.loss).to_string(),
            self.focal_gamma.to_string(),
            self.asl_gamma_pos.to_string(),
            self.asl_gamma_neg.to_string(),
            t.mfm.gamma_pn_pos.to_string(),
            t.mfm.gamma_pn_neg.to_string(),
            t.mfm.w_pos.to_string(),
            t.mfm.w_neg.to_string(),
            t.mfm.prob_clamp.to_string(),
            t.gamma_ht_scale.to_string(),
            t.htb.alpha.to_string(),
            t.htb.prob_clamp.to_string(),
            phi.to_string(),
            hidden.join(","),
            t.arch.feature_dim.to_string(),
            t.arch.groups.to_string(),
            t.arch.rho.to_string(),
            t.arch.eta.to_string(),
            t.arch.attention_hidden.to_string(),
            t.use_rlc.to_string(),
            t.use_htb.to_string(),
            t.dynamic_distribution.to_string(),
            t.teacher_mfm.to_string(),
            source.to_string(),
            t.eval_period.to_string(),
            t.seed.to_string(),
            self.checkpoint_every.to_string(),
        ];
        debug_assert_eq!(values.len(), Self::KEYS.len());
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}
