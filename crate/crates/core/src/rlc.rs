//! Online recall of missing labels.
//!
//! An unannotated class `c` is recalled as positive when the model's
//! probability exceeds both a fixed threshold `tau` and the running mean
//! confidence `P_c` that the model assigns to annotated positives of `c`.
//! Recalled labels also feed a dynamic class distribution, which in turn
//! re-derives the head/tail focal factor.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::losses::{compute_gamma_ht, mfm, HeadTailFactor, LossGrad, MfmConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Running mean probability over annotated positives, per class.
    pub p_mean: Vec<f64>,
    pub d_static: Vec<usize>,
    /// Observed plus recalled positives.
    pub d_dynamic: Vec<usize>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
}

impl ClassStats {
    pub fn new(class_counts: &[usize]) -> Self {
        let n = class_counts.len();
        ClassStats {
            p_mean: vec![0.0; n],
            d_static: class_counts.to_vec(),
            d_dynamic: class_counts.to_vec(),
            tp: vec![0; n],
            fp: vec![0; n],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.p_mean.len()
    }

    pub fn total_corrections(&self) -> usize {
        self.d_dynamic
            .iter()
            .zip(&self.d_static)
            .map(|(d, s)| d - s)
            .sum()
    }

    /// Exponential moving average of `p` over the classes annotated in `y_obs`.
    pub fn update(&mut self, p: &[f64], y_obs: &[u8], momentum: f64) -> Result<()> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", format!("{momentum} is outside [0, 1)")));
        }
        check_len("stats probabilities", self.num_classes(), p.len())?;
        check_len("stats labels", self.num_classes(), y_obs.len())?;
        for c in 0..p.len() {
            if y_obs[c] == 1 {
                self.p_mean[c] = momentum * self.p_mean[c] + (1.0 - momentum) * p[c];
            }
        }
        Ok(())
    }

    /// Head/tail factor of the static (observed) distribution.
    pub fn static_factor(&self, scale: f64) -> Result<HeadTailFactor> {
        compute_gamma_ht(&self.d_static, scale)
    }

    /// Head/tail factor of the dynamic (observed + recalled) distribution.
    pub fn dynamic_factor(&self, scale: f64) -> Result<HeadTailFactor> {
        compute_gamma_ht(&self.d_dynamic, scale)
    }
}

/// Free-function form of [`ClassStats::update`].
pub fn update_stats(stats: &mut ClassStats, p: &[f64], y_obs: &[u8], momentum: f64) -> Result<()> {
    stats.update(p, y_obs, momentum)
}

/// One recalled label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub sample_id: String,
    pub class: usize,
    pub epoch: usize,
    pub probability: f64,
    /// `max(tau, P_c)` at the time of the correction.
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub was_true_positive: Option<bool>,
}

/// Identifies the sample whose labels are being corrected.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub id: &'a str,
    pub epoch: usize,
    pub y_full: Option<&'a [u8]>,
}

/// Apply the recall rule `p_c > max(tau, P_c) and y_c = 0`.
///
/// `y_current` is the sample's current target (observed labels plus earlier
/// corrections). Returns the new target and one record per newly recalled
/// class; `stats.d_dynamic` and the TP/FP tallies are updated in place.
pub fn correct(
    p: &[f64],
    y_current: &[u8],
    stats: &mut ClassStats,
    tau: f64,
    sample: SampleRef<'_>,
) -> Result<(Vec<u8>, Vec<CorrectionRecord>)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid("tau", format!("{tau} is outside (0, 1)")));
    }
    check_len("correction probabilities", stats.num_classes(), p.len())?;
    check_len("correction labels", stats.num_classes(), y_current.len())?;
    let mut y_hat = y_current.to_vec();
    let mut records = Vec::new();
    for c in 0..p.len() {
        if y_current[c] == 1 {
            continue;
        }
        let threshold = tau.max(stats.p_mean[c]);
        if p[c] > threshold {
            y_hat[c] = 1;
            stats.d_dynamic[c] += 1;
            let truth = sample.y_full.map(|f| f[c] == 1);
            match truth {
                Some(true) => stats.tp[c] += 1,
                Some(false) => stats.fp[c] += 1,
                None => {}
            }
            records.push(CorrectionRecord {
                sample_id: sample.id.to_string(),
                class: c,
                epoch: sample.epoch,
                probability: p[c],
                threshold,
                was_true_positive: truth,
            });
        }
    }
    Ok((y_hat, records))
}

/// `B_s / max(1, N_t)`.
pub fn batch_coefficient(batch_size: usize, n_corrected: usize) -> f64 {
    batch_size as f64 / n_corrected.max(1) as f64
}

/// Corrected-label loss for one sample: MFM on the corrected targets
/// (recalled and annotated positives take the positive term, the rest the
/// negative term), scaled by the batch coefficient.
#[allow(clippy::too_many_arguments)]
pub fn rlc_loss(
    p: &[f64],
    y_obs: &[u8],
    y_hat: &[u8],
    cfg: &MfmConfig,
    ht_dynamic: &HeadTailFactor,
    batch_size: usize,
    n_corrected_in_batch: usize,
) -> Result<LossGrad> {
    check_len("rlc targets", y_obs.len(), y_hat.len())?;
    if y_obs.iter().zip(y_hat).any(|(&o, &h)| o > h) {
        return Err(Error::invalid("y_hat", "corrected labels may not drop annotated positives"));
    }
    let mut out = mfm(p, y_hat, cfg, ht_dynamic)?;
    let k = batch_coefficient(batch_size, n_corrected_in_batch);
    out.loss *= k;
    for g in out.grad.iter_mut() {
        *g *= k;
    }
    Ok(out)
}
