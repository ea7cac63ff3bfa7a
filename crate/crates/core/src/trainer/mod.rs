//! Joint training of the head teacher, tail teacher and balanced student.
//!
//! Each step runs the three backbones, fuses the teacher features into the
//! student with additive attention, biases the teacher logits with the moving
//! gradient vector, recalls missing labels from the student's confidences and
//! minimizes
//!
//! ```text
//! total = lambda_c * L_rlc + lambda_m * L_mfm + lambda_b * L_htb
//! ```
//!
//! with Adam, one learning-rate schedule per model.

mod checkpoint;
mod config;
mod model;
mod optimizer;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{ArchConfig, CorrectionSource, LrDecay, TrainConfig};
pub use model::{Branch, ModelRole, SampleTrace, TeacherTrace, TriModel};
pub use optimizer::Adam;

use crate::data::{Dataset, ShotGroup};
use crate::error::{Error, Result};
use crate::eval::{correction_recall, per_class_ap, MetricsReport};
use crate::htb::{kappa, teacher_term, MovingGradient, TeacherTerm};
use crate::losses::{compute_gamma_ht, focal_family, sigmoid, Exponents};
use crate::netcore::ParamSet;
use crate::rlc::{batch_coefficient, correct, ClassStats, CorrectionRecord, SampleRef};

/// Quantities held fixed while the objective is differentiated: the corrected
/// targets, the per-class exponents, the batch coefficient and optionally
/// the distillation weights.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub targets: Vec<Vec<u8>>,
    pub exps_static: Exponents,
    pub exps_dynamic: Exponents,
    pub coefficient: f64,
    pub kappa: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelLosses {
    pub head: Option<f64>,
    pub balanced: f64,
    pub tail: Option<f64>,
}

/// Value and gradient of the batch objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: f64,
    pub rlc: f64,
    pub mfm: f64,
    pub htb: f64,
    pub kappa: Option<(f64, f64)>,
    pub model_losses: ModelLosses,
    pub grads: TriModel,
    /// Sum over the batch of the gradient at the fused balanced feature.
    pub feature_grad_sum: Vec<f64>,
}

fn probs(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| sigmoid(v)).collect()
}

fn add_scaled(acc: &mut [f64], g: &[f64], k: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += k * b;
    }
}

/// Forward and backward of the batch objective (mean over samples).
pub fn objective(
    model: &TriModel,
    cfg: &TrainConfig,
    mg: &MovingGradient,
    xs: &[&[f64]],
    frozen: &Frozen,
) -> Result<Objective> {
    let traces = xs
        .iter()
        .map(|x| model.forward(x, mg, cfg.use_htb))
        .collect::<Result<Vec<_>>>()?;
    objective_from_traces(model, cfg, mg, &traces, frozen)
}

fn objective_from_traces(
    model: &TriModel,
    cfg: &TrainConfig,
    mg: &MovingGradient,
    traces: &[SampleTrace],
    frozen: &Frozen,
) -> Result<Objective> {
    let b = traces.len();
    if b == 0 {
        return Err(Error::invalid("batch", "empty batch"));
    }
    let inv_b = 1.0 / b as f64;
    let eps = cfg.mfm.prob_clamp;
    let lambda_c = cfg.effective_lambda_c();
    let lambda_m = cfg.lambda_m;
    let lambda_b = cfg.effective_lambda_b();
    let tri = cfg.use_htb;
    let c = model.num_classes();

    let mut g_zb = vec![vec![0.0; c]; b];
    let mut g_zh = vec![vec![0.0; c]; b];
    let mut g_zt = vec![vec![0.0; c]; b];
    let (mut l_rlc, mut l_mfm) = (0.0, 0.0);
    let mut losses = ModelLosses::default();
    let (mut head_sum, mut tail_sum) = (0.0, 0.0);
    let mut teacher_terms: Vec<(TeacherTerm, TeacherTerm)> = Vec::new();

    for (i, tr) in traces.iter().enumerate() {
        let y = &frozen.targets[i];
        let p_b = probs(&tr.z_b);
        let main = focal_family(&p_b, y, &frozen.exps_static, eps)?;
        losses.balanced += main.loss * inv_b;
        l_mfm += main.loss * inv_b;
        add_scaled(&mut g_zb[i], &main.grad, lambda_m * inv_b);

        if lambda_c > 0.0 {
            let r = focal_family(&p_b, y, &frozen.exps_dynamic, eps)?;
            l_rlc += frozen.coefficient * r.loss * inv_b;
            add_scaled(&mut g_zb[i], &r.grad, lambda_c * frozen.coefficient * inv_b);
        }

        if let Some(t) = tr.teachers.as_ref().filter(|_| tri) {
            let lh = focal_family(&probs(&t.zh_adj), y, &frozen.exps_static, eps)?;
            let lt = focal_family(&probs(&t.zt_adj), y, &frozen.exps_static, eps)?;
            head_sum += lh.loss * inv_b;
            tail_sum += lt.loss * inv_b;
            if cfg.teacher_mfm {
                l_mfm += (lh.loss + lt.loss) * inv_b;
                add_scaled(&mut g_zh[i], &lh.grad, lambda_m * inv_b);
                add_scaled(&mut g_zt[i], &lt.grad, lambda_m * inv_b);
            }
            let th = teacher_term(&t.zh_adj, &tr.z_b, y, &frozen.exps_static, cfg.htb.prob_clamp, cfg.htb.phi)?;
            let tt = teacher_term(&t.zt_adj, &tr.z_b, y, &frozen.exps_static, cfg.htb.prob_clamp, cfg.htb.phi)?;
            teacher_terms.push((th, tt));
        }
    }

    let mut l_htb = 0.0;
    let mut kappa_used = None;
    if tri {
        losses.head = Some(head_sum);
        losses.tail = Some(tail_sum);
        let l_h: f64 = teacher_terms.iter().map(|(h, _)| h.loss).sum::<f64>() * inv_b;
        let l_t: f64 = teacher_terms.iter().map(|(_, t)| t.loss).sum::<f64>() * inv_b;
        let (kh, kt) = frozen.kappa.unwrap_or_else(|| kappa(l_h, l_t, cfg.htb.alpha));
        kappa_used = Some((kh, kt));
        l_htb = kh * l_h + kt * l_t;
        if lambda_b > 0.0 {
            for (i, (th, tt)) in teacher_terms.iter().enumerate() {
                add_scaled(&mut g_zh[i], &th.grad_teacher, lambda_b * kh * inv_b);
                add_scaled(&mut g_zt[i], &tt.grad_teacher, lambda_b * kt * inv_b);
                add_scaled(&mut g_zb[i], &th.grad_student, lambda_b * kh * inv_b);
                add_scaled(&mut g_zb[i], &tt.grad_student, lambda_b * kt * inv_b);
            }
        }
    }

    let mut grads = model.zeros_like();
    let mut feature_grad_sum = vec![0.0; model.balanced.head.feature_dim()];
    for (i, tr) in traces.iter().enumerate() {
        let teachers = tri.then(|| (g_zh[i].as_slice(), g_zt[i].as_slice()));
        let g_fb = model.backward(tr, &g_zb[i], teachers, mg, &mut grads);
        add_scaled(&mut feature_grad_sum, &g_fb, 1.0);
    }

    let total = lambda_c * l_rlc + lambda_m * l_mfm + lambda_b * l_htb;
    Ok(Objective {
        total,
        rlc: l_rlc,
        mfm: l_mfm,
        htb: l_htb,
        kappa: kappa_used,
        model_losses: losses,
        grads,
        feature_grad_sum,
    })
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepMetrics {
    pub loss_total: f64,
    pub loss_rlc: f64,
    pub loss_mfm: f64,
    pub loss_htb: f64,
    pub new_corrections: usize,
    pub corrected_in_batch: usize,
    pub kappa: Option<(f64, f64)>,
    pub model_losses: ModelLosses,
}

/// One row of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_rlc: f64,
    pub loss_mfm: f64,
    pub loss_htb: f64,
    pub corrections: usize,
    pub tp: usize,
    pub fp: usize,
    pub map_total: Option<f64>,
    pub map_many: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_few: Option<f64>,
    pub recall: Option<f64>,
    pub loss_head: Option<f64>,
    pub loss_balanced: f64,
    pub loss_tail: Option<f64>,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,loss_total,loss_rlc,loss_mfm,loss_htb,corrections,tp,fp,mAP_total,mAP_many,mAP_medium,mAP_few,recall";
pub const MODEL_LOSS_CSV_HEADER: &str = "epoch,loss_head,loss_balanced,loss_tail";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// The epoch log as CSV. Absent metrics are empty cells.
pub fn epoch_csv(history: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.loss_total,
            r.loss_rlc,
            r.loss_mfm,
            r.loss_htb,
            r.corrections,
            r.tp,
            r.fp,
            opt(r.map_total),
            opt(r.map_many),
            opt(r.map_medium),
            opt(r.map_few),
            opt(r.recall)
        );
    }
    out
}

pub fn model_loss_csv(history: &[EpochLog]) -> String {
    let mut out = String::from(MODEL_LOSS_CSV_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.epoch,
            opt(r.loss_head),
            r.loss_balanced,
            opt(r.loss_tail)
        );
    }
    out
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub model: TriModel,
    pub adam: Adam,
    pub moving: MovingGradient,
    pub stats: ClassStats,
    /// Recalled labels per training sample (1 = recalled).
    pub corrected: Vec<Vec<u8>>,
    pub records: Vec<CorrectionRecord>,
    pub epoch: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochLog>,
}

pub struct Trainer {
    config: TrainConfig,
    train: Dataset,
    test: Dataset,
    dataset_hash: String,
    eval_groups: Vec<ShotGroup>,
    exps_static: Exponents,
    pub state: TrainerState,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let (train, test) = dataset.split(config.eval_period);
        if train.is_empty() {
            return Err(Error::invalid("dataset", "training split is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = TriModel::new(dataset.feature_dim(), dataset.num_classes(), &config.arch, &mut rng)?;
        let adam = Adam::new(&model, config.beta1, config.beta2, config.adam_eps);
        let state = TrainerState {
            adam,
            moving: MovingGradient::new(config.arch.feature_dim, config.mu),
            stats: ClassStats::new(&train.manifest.class_counts),
            corrected: vec![vec![0; dataset.num_classes()]; train.len()],
            records: Vec::new(),
            epoch: 0,
            step: 0,
            rng,
            history: Vec::new(),
            model,
        };
        Self::assemble(config, dataset, train, test, state)
    }

    fn assemble(
        config: TrainConfig,
        dataset: &Dataset,
        train: Dataset,
        test: Dataset,
        state: TrainerState,
    ) -> Result<Self> {
        let ht = compute_gamma_ht(&train.manifest.class_counts, config.gamma_ht_scale)?;
        let exps_static = config.loss.exponents(&config.mfm, &ht);
        Ok(Trainer {
            eval_groups: train.manifest.shot_groups.clone(),
            dataset_hash: dataset.content_hash(),
            exps_static,
            config,
            train,
            test,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn train_split(&self) -> &Dataset {
        &self.train
    }

    pub fn test_split(&self) -> &Dataset {
        &self.test
    }

    pub fn dataset_hash(&self) -> &str {
        &self.dataset_hash
    }

    /// Shot groups of the evaluation classes, from observed training counts.
    pub fn shot_groups(&self) -> &[ShotGroup] {
        &self.eval_groups
    }

    pub fn static_exponents(&self) -> &Exponents {
        &self.exps_static
    }

    fn dynamic_exponents(&self) -> Result<Exponents> {
        if !self.config.dynamic_distribution {
            return Ok(self.exps_static.clone());
        }
        let ht = self.state.stats.dynamic_factor(self.config.gamma_ht_scale)?;
        Ok(self.config.loss.exponents(&self.config.mfm, &ht))
    }

    /// Current target of training sample `i`: observed labels plus recalls.
    pub fn target(&self, i: usize) -> Vec<u8> {
        self.train.samples[i]
            .y_obs
            .iter()
            .zip(&self.state.corrected[i])
            .map(|(o, c)| o | c)
            .collect()
    }

    fn learning_rate(&self, role: ModelRole) -> f64 {
        let d = &self.config.lr_decay;
        let decay = match role {
            ModelRole::Head => d.head,
            ModelRole::Tail => d.tail,
            ModelRole::Balanced => d.balanced,
        };
        self.config.learning_rate * decay.powi(self.state.epoch as i32)
    }

    /// One optimizer step on the training samples at `batch` (indices into
    /// the training split).
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::invalid("batch", "empty batch"));
        }
        let cfg = &self.config;
        let traces = batch
            .iter()
            .map(|&i| {
                self.state
                    .model
                    .forward(&self.train.samples[i].x, &self.state.moving, cfg.use_htb)
            })
            .collect::<Result<Vec<_>>>()?;

        let source: Vec<Vec<f64>> = traces
            .iter()
            .map(|t| match (cfg.correction_source, &t.teachers) {
                (CorrectionSource::Head, Some(tt)) => probs(&tt.z_h),
                _ => probs(&t.z_b),
            })
            .collect();

        // Candidates are merged in sample order so the outcome does not depend
        // on the shuffled batch order.
        let mut by_sample: Vec<usize> = (0..batch.len()).collect();
        by_sample.sort_by_key(|&k| batch[k]);
        let mut new_corrections = 0;
        if cfg.use_rlc && self.state.epoch >= cfg.warmup_epochs {
            for &k in &by_sample {
                let i = batch[k];
                let current = self.target(i);
                let s = &self.train.samples[i];
                let (y_hat, records) = correct(
                    &source[k],
                    &current,
                    &mut self.state.stats,
                    cfg.tau,
                    SampleRef {
                        id: &s.id,
                        epoch: self.state.epoch + 1,
                        y_full: s.y_full.as_deref(),
                    },
                )?;
                for (c, (&o, &h)) in s.y_obs.iter().zip(&y_hat).enumerate() {
                    if h == 1 && o == 0 {
                        self.state.corrected[i][c] = 1;
                    }
                }
                new_corrections += records.len();
                self.state.records.extend(records);
            }
        }
        for &k in &by_sample {
            let i = batch[k];
            self.state
                .stats
                .update(&source[k], &self.train.samples[i].y_obs, cfg.stats_momentum)?;
        }

        let targets: Vec<Vec<u8>> = batch.iter().map(|&i| self.target(i)).collect();
        let corrected_in_batch: usize = batch
            .iter()
            .map(|&i| self.state.corrected[i].iter().map(|&v| v as usize).sum::<usize>())
            .sum();
        let frozen = Frozen {
            targets,
            exps_static: self.exps_static.clone(),
            exps_dynamic: self.dynamic_exponents()?,
            coefficient: batch_coefficient(batch.len(), corrected_in_batch),
            kappa: None,
        };
        let obj = objective_from_traces(&self.state.model, cfg, &self.state.moving, &traces, &frozen)?;

        if !obj.total.is_finite() || !obj.grads.all_finite() {
            let ids: Vec<&str> = batch.iter().map(|&i| self.train.samples[i].id.as_str()).collect();
            return Err(Error::NonFinite {
                epoch: self.state.epoch + 1,
                step: self.state.step as usize,
                detail: format!(
                    "total={} rlc={} mfm={} htb={}; batch={ids:?}; config={}",
                    obj.total,
                    obj.rlc,
                    obj.mfm,
                    obj.htb,
                    serde_json::to_string(cfg).unwrap_or_default()
                ),
            });
        }

        let rates = [ModelRole::Head, ModelRole::Tail, ModelRole::Balanced].map(|r| self.learning_rate(r));
        self.state.adam.step(&mut self.state.model, &obj.grads, |role| match role {
            ModelRole::Head => rates[0],
            ModelRole::Tail => rates[1],
            ModelRole::Balanced => rates[2],
        });
        self.state.moving.update(&obj.feature_grad_sum)?;
        self.state.step += 1;

        Ok(StepMetrics {
            loss_total: obj.total,
            loss_rlc: obj.rlc,
            loss_mfm: obj.mfm,
            loss_htb: obj.htb,
            new_corrections,
            corrected_in_batch,
            kappa: obj.kappa,
            model_losses: obj.model_losses,
        })
    }

    /// Train one epoch over a seeded shuffle of the training split, then
    /// evaluate on the held-out split.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.state.rng);
        let records_before = self.state.records.len();
        let bs = self.config.batch_size;
        let mut sum = StepMetrics::default();
        let (mut head, mut tail, mut steps) = (0.0, 0.0, 0usize);
        for batch in order.chunks(bs) {
            let m = self.train_step(batch)?;
            sum.loss_total += m.loss_total;
            sum.loss_rlc += m.loss_rlc;
            sum.loss_mfm += m.loss_mfm;
            sum.loss_htb += m.loss_htb;
            sum.model_losses.balanced += m.model_losses.balanced;
            head += m.model_losses.head.unwrap_or(0.0);
            tail += m.model_losses.tail.unwrap_or(0.0);
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let new_records = &self.state.records[records_before..];
        let tp = new_records.iter().filter(|r| r.was_true_positive == Some(true)).count();
        let fp = new_records.iter().filter(|r| r.was_true_positive == Some(false)).count();
        self.state.epoch += 1;

        let scores = self.predict(&self.test)?;
        let report = MetricsReport::new(per_class_ap(&scores, &self.test), &self.eval_groups);
        let tri = self.config.use_htb;
        let log = EpochLog {
            epoch: self.state.epoch,
            loss_total: sum.loss_total / n,
            loss_rlc: sum.loss_rlc / n,
            loss_mfm: sum.loss_mfm / n,
            loss_htb: sum.loss_htb / n,
            corrections: new_records.len(),
            tp,
            fp,
            map_total: report.map_total,
            map_many: report.map_many,
            map_medium: report.map_medium,
            map_few: report.map_few,
            recall: correction_recall(&self.state.records, &self.train),
            loss_head: tri.then_some(head / n),
            loss_balanced: sum.model_losses.balanced / n,
            loss_tail: tri.then_some(tail / n),
        };
        self.state.history.push(log.clone());
        Ok(log)
    }

    /// Run epochs until `config.epochs` have completed. `on_epoch` runs after
    /// every epoch (checkpointing, logging); an error from it stops training.
    pub fn run<F>(&mut self, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer, &EpochLog) -> Result<()>,
    {
        while self.state.epoch < self.config.epochs {
            let log = self.run_epoch()?;
            on_epoch(self, &log)?;
        }
        Ok(())
    }

    /// Balanced-model probabilities for every sample of `ds`.
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
        ds.samples
            .iter()
            .map(|s| {
                self.state
                    .model
                    .forward(&s.x, &self.state.moving, self.config.use_htb)
                    .map(|t| probs(&t.z_b))
            })
            .collect()
    }

    /// Full metrics report on `ds` using the current model.
    pub fn evaluate(&self, ds: &Dataset) -> Result<MetricsReport> {
        let scores = self.predict(ds)?;
        let mut report = MetricsReport::new(per_class_ap(&scores, ds), &self.eval_groups);
        report.correction_recall = correction_recall(&self.state.records, &self.train);
        report.tp_curve = self.state.history.iter().map(|h| h.tp).collect();
        report.fp_curve = self.state.history.iter().map(|h| h.fp).collect();
        Ok(report)
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.state.history
    }

    pub fn records(&self) -> &[CorrectionRecord] {
        &self.state.records
    }

    /// Correction records as JSON lines.
    pub fn correction_log(&self) -> String {
        let mut out = String::new();
        for r in &self.state.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Train from scratch for `config.epochs` epochs.
pub fn fit(config: TrainConfig, dataset: &Dataset) -> Result<Trainer> {
    let mut trainer = Trainer::new(config, dataset)?;
    trainer.run(|_, _| Ok(()))?;
    Ok(trainer)
}
