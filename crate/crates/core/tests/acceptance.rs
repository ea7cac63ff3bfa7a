//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Training runs use the committed experiment configs under `configs/`.

use std::io::Write as _;
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use comic_core::data::Dataset;
use comic_core::eval::average_precision;
use comic_core::gradcheck::{check_all, Component, GradCheckOptions};
use comic_core::htb::{adjust_logits, kappa, MovingGradient, Teacher};
use comic_core::losses::{bce, compute_gamma_ht, focal, mfm, sigmoid, MfmConfig};
use comic_core::netcore::NormalizedHead;
use comic_core::trainer::{epoch_csv, Checkpoint};
use comic_core::{RunConfig, Trainer};

// Pinned tolerances and regression bounds. The margins below were calibrated
// once on the reference seed (observed: total +0.125, few-shot +0.372) and are
// kept at roughly half of the observed gap.
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const REDUCTION_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;
const KAPPA_SUM_TOL: f64 = 1e-12;
const MIN_TOTAL_MARGIN: f64 = 0.06;
const MIN_FEW_MARGIN: f64 = 0.20;
const RUN_BUDGET: Duration = Duration::from_secs(300);
const ABLATION_TOL: f64 = 0.01;
const MISSING_RATE_TOL: f64 = 0.01;
const RESUME_AT_EPOCH: usize = 20;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(out: &Outcome) {
    let status = if out.pass { "PASS" } else { "FAIL" };
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "criterion {:>2} [{status}] {}: {}", out.id, out.name, out.detail);
    let _ = stdout.flush();
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn load(name: &str) -> RunConfig {
    RunConfig::load(config_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

struct Run {
    trainer: Trainer,
    dataset: Dataset,
    elapsed: Duration,
}

impl Run {
    fn total(&self) -> f64 {
        self.trainer.history().last().and_then(|h| h.map_total).unwrap_or(f64::NAN)
    }

    fn few(&self) -> f64 {
        self.trainer.history().last().and_then(|h| h.map_few).unwrap_or(f64::NAN)
    }
}

fn train(cfg: RunConfig) -> Run {
    let dataset = cfg.data.build().expect("dataset builds");
    let start = Instant::now();
    let trainer = comic_core::fit(cfg.train, &dataset).expect("training succeeds");
    Run {
        trainer,
        dataset,
        elapsed: start.elapsed(),
    }
}

/// Train the reference config to `RESUME_AT_EPOCH`, round-trip a checkpoint
/// through JSON, restore and finish.
fn train_with_resume(cfg: RunConfig) -> Run {
    let dataset = cfg.data.build().expect("dataset builds");
    let start = Instant::now();
    let mut first = Trainer::new(cfg.train.clone(), &dataset).expect("trainer");
    while first.state.epoch < RESUME_AT_EPOCH {
        first.run_epoch().expect("epoch");
    }
    let text = first.checkpoint().to_json();
    drop(first);
    let ckpt = Checkpoint::from_json(&text).expect("checkpoint parses");
    let mut resumed = Trainer::restore(ckpt, &dataset).expect("restore");
    resumed.run(|_, _| Ok(())).expect("resumed training");
    Run {
        trainer: resumed,
        dataset,
        elapsed: start.elapsed(),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let reports = check_all(&Component::ALL, &GradCheckOptions::default()).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let worst: Vec<String> = reports
        .iter()
        .map(|r| format!("{}={:.1e}", r.component, r.max_rel_err))
        .collect();
    let enough = reports
        .iter()
        .all(|r| r.component == Component::Composite || r.instances >= 100);
    Outcome {
        id: 1,
        name: "gradient suite",
        pass: reports.iter().all(|r| r.passed()) && enough && elapsed < GRADCHECK_BUDGET,
        detail: format!("{} in {:.2?}", worst.join(" "), elapsed),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.random_range(1..12);
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-8.0..8.0)).collect();
        let y: Vec<u8> = (0..c).map(|_| rng.random_range(0..2u8)).collect();
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let gamma = rng.random_range(0.0..5.0);
        let counts: Vec<usize> = (0..c).map(|_| rng.random_range(1..500)).collect();
        let cfg = MfmConfig {
            gamma_pn_pos: gamma,
            gamma_pn_neg: gamma,
            w_pos: 0.0,
            w_neg: 0.0,
            ..MfmConfig::default()
        };
        let ht = compute_gamma_ht(&counts, 0.0).unwrap();
        let m = mfm(&p, &y, &cfg, &ht).unwrap();
        let f = focal(&p, &y, gamma).unwrap();
        let f0 = focal(&p, &y, 0.0).unwrap();
        let b = bce(&p, &y).unwrap();
        worst = worst.max((m.loss - f.loss).abs()).max((f0.loss - b.loss).abs());
        for i in 0..c {
            worst = worst
                .max((m.grad[i] - f.grad[i]).abs())
                .max((f0.grad[i] - b.grad[i]).abs());
        }
    }
    Outcome {
        id: 2,
        name: "reduction identities",
        pass: worst <= REDUCTION_TOL,
        detail: format!("max |difference| {worst:.1e} over 1000 draws"),
    }
}

/// Precision at every cut-off of the ranking, averaged over the positives.
/// Rank is computed pairwise (no sort): ties are ordered by input position.
fn ap_by_enumeration(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| {
        1 + (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let mut by_rank: Vec<(usize, usize)> = (0..n).map(|i| (rank(i), i)).collect();
    by_rank.sort_unstable();
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return None;
    }
    let mut sum = 0.0;
    for cutoff in 1..=n {
        let (_, at) = by_rank[cutoff - 1];
        if labels[at] == 1 {
            let hits = by_rank[..cutoff].iter().filter(|(_, j)| labels[*j] == 1).count();
            sum += hits as f64 / cutoff as f64;
        }
    }
    Some(sum / positives as f64)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for n in 1..=8usize {
        for pattern in 0u32..(1 << n) {
            let labels: Vec<u8> = (0..n).map(|i| ((pattern >> i) & 1) as u8).collect();
            // Distinct scores, then heavily tied scores.
            let distinct: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let tied: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64 / 2.0).collect();
            for scores in [distinct, tied] {
                checked += 1;
                if average_precision(&scores, &labels) != ap_by_enumeration(&scores, &labels) {
                    mismatches += 1;
                }
            }
        }
    }
    Outcome {
        id: 3,
        name: "AP oracle",
        pass: mismatches == 0,
        detail: format!("{mismatches} mismatches in {checked} instances of up to 8 samples"),
    }
}

fn criterion_4(reference: &Run) -> Outcome {
    let tau = reference.trainer.config().tau;
    let train = reference.trainer.train_split();
    let index: std::collections::HashMap<&str, usize> = train
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let records = reference.trainer.records();
    let mut bad = 0usize;
    for r in records {
        let i = index[r.sample_id.as_str()];
        let sound = r.probability > r.threshold
            && r.threshold >= tau
            && train.samples[i].y_obs[r.class] == 0;
        bad += usize::from(!sound);
    }
    let dropped = (0..train.len())
        .filter(|&i| {
            let target = reference.trainer.target(i);
            train.samples[i].y_obs.iter().zip(&target).any(|(&o, &t)| o == 1 && t == 0)
        })
        .count();

    // Step-level replay: before every step, snapshot the model and the running
    // positive means; every record the step emits must match them.
    let cfg = load("reference.conf");
    let mut trainer = Trainer::new(cfg.train.clone(), &reference.dataset).expect("trainer");
    let mut order_rng = ChaCha8Rng::seed_from_u64(4);
    let mut replay_checked = 0usize;
    let mut replay_bad = 0usize;
    for _ in 0..5 {
        let mut order: Vec<usize> = (0..trainer.train_split().len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
        for batch in order.chunks(cfg.train.batch_size) {
            let model = trainer.state.model.clone();
            let moving = trainer.state.moving.clone();
            let means = trainer.state.stats.p_mean.clone();
            let before: Vec<Vec<u8>> = batch.iter().map(|&i| trainer.target(i)).collect();
            let seen = trainer.state.records.len();
            trainer.train_step(batch).expect("step");
            for r in &trainer.state.records[seen..] {
                replay_checked += 1;
                let i = index[r.sample_id.as_str()];
                let k = batch.iter().position(|&b| b == i).expect("record from this batch");
                let trace = model.forward(&train.samples[i].x, &moving, true).expect("forward");
                let p = sigmoid(trace.z_b[r.class]);
                let threshold = tau.max(means[r.class]);
                if !(p > threshold && p == r.probability && threshold == r.threshold && before[k][r.class] == 0) {
                    replay_bad += 1;
                }
            }
            for (k, &i) in batch.iter().enumerate() {
                let after = trainer.target(i);
                if before[k].iter().zip(&after).any(|(&b, &a)| b == 1 && a == 0) {
                    replay_bad += 1;
                }
            }
        }
        trainer.state.epoch += 1;
    }
    Outcome {
        id: 4,
        name: "correction soundness",
        pass: bad == 0 && dropped == 0 && replay_bad == 0 && replay_checked > 0 && !records.is_empty(),
        detail: format!(
            "{} logged records, {bad} unsound, {dropped} samples lost a positive; replay {replay_checked} records, {replay_bad} violations",
            records.len()
        ),
    }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut zero_exact = true;
    for _ in 0..1000 {
        let c = rng.random_range(2..10);
        let groups = [1, 2, 4][rng.random_range(0..3)];
        let d = groups * rng.random_range(1..5);
        let head = NormalizedHead::new(c, d, groups, 16.0, 1e-6, &mut rng).unwrap();
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-20.0..20.0)).collect();
        let mut mg = MovingGradient::new(d, 0.9);
        mg.e = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (zh, _) = adjust_logits(&z, Teacher::Head, &head, &mg).unwrap();
        let (zt, _) = adjust_logits(&z, Teacher::Tail, &head, &mg).unwrap();
        for i in 0..c {
            worst = worst.max((zh[i] + zt[i] - 2.0 * z[i]).abs());
        }
        let still = MovingGradient::new(d, 0.9);
        let (h0, _) = adjust_logits(&z, Teacher::Head, &head, &still).unwrap();
        let (t0, _) = adjust_logits(&z, Teacher::Tail, &head, &still).unwrap();
        zero_exact &= h0 == z && t0 == z;
    }
    Outcome {
        id: 5,
        name: "adjustment symmetry",
        pass: worst <= SYMMETRY_TOL && zero_exact,
        detail: format!("max |z_head + z_tail - 2z| {worst:.1e}; zero vector leaves logits exact: {zero_exact}"),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut order_violations = 0usize;
    for alpha in [0.5, 1.0, 2.0, 4.0] {
        for i in 0..1000 {
            let lh: f64 = rng.random_range(0.0..5.0);
            // Every tenth pair is tied to exercise the boundary.
            let lt: f64 = if i % 10 == 0 { lh } else { rng.random_range(0.0..5.0) };
            let (kh, kt) = kappa(lh, lt, alpha);
            worst = worst.max((kh + kt - 1.0).abs());
            if (kh >= kt) != (lh >= lt) {
                order_violations += 1;
            }
        }
    }
    Outcome {
        id: 6,
        name: "distillation weights",
        pass: worst <= KAPPA_SUM_TOL && order_violations == 0,
        detail: format!("max |k_h + k_t - 1| {worst:.1e}; {order_violations} ordering violations in 4000 pairs"),
    }
}

fn criterion_7(full: &Run, bce: &Run) -> Outcome {
    let d_total = full.total() - bce.total();
    let d_few = full.few() - bce.few();
    let slowest = full.elapsed.max(bce.elapsed);
    Outcome {
        id: 7,
        name: "full model beats BCE comparator",
        pass: d_total >= MIN_TOTAL_MARGIN && d_few >= MIN_FEW_MARGIN && slowest < RUN_BUDGET,
        detail: format!(
            "total {:.4} vs {:.4} (margin {d_total:+.4}, need {MIN_TOTAL_MARGIN}); few {:.4} vs {:.4} (margin {d_few:+.4}, need {MIN_FEW_MARGIN}); slowest run {:.1?}",
            full.total(),
            bce.total(),
            full.few(),
            bce.few(),
            slowest
        ),
    }
}

fn criterion_8(full: &Run, ablations: &[(&str, &Run)]) -> Outcome {
    let parts: Vec<String> = ablations
        .iter()
        .map(|(name, r)| format!("-{name} {:.4}", r.total()))
        .collect();
    let pass = ablations.iter().all(|(_, r)| r.total() <= full.total() + ABLATION_TOL);
    Outcome {
        id: 8,
        name: "ablations",
        pass,
        detail: format!("full {:.4}; {} (tolerance {ABLATION_TOL})", full.total(), parts.join(", ")),
    }
}

fn criterion_9(mr0: &Run, mr40: &Run, mr50: &Run) -> Outcome {
    let (a, b, c) = (mr0.total(), mr40.total(), mr50.total());
    Outcome {
        id: 9,
        name: "missing-rate ordering",
        pass: a >= b && b >= c - MISSING_RATE_TOL,
        detail: format!("total mAP 0%: {a:.4}, 40%: {b:.4}, 50%: {c:.4} (tolerance {MISSING_RATE_TOL})"),
    }
}

fn criterion_10(full: &Run) -> Outcome {
    let tp: usize = full.trainer.history().iter().map(|h| h.tp).sum();
    let fp: usize = full.trainer.history().iter().map(|h| h.fp).sum();
    let recall = full.trainer.history().last().and_then(|h| h.recall).unwrap_or(0.0);
    Outcome {
        id: 10,
        name: "corrections mostly right",
        pass: tp >= fp && recall > 0.0,
        detail: format!("cumulative TP {tp}, FP {fp}; correction recall {recall:.4}"),
    }
}

fn criterion_11(full: &Run, repeat: &Run, resumed: &Run) -> Outcome {
    let a = epoch_csv(full.trainer.history());
    let same_csv = a == epoch_csv(repeat.trainer.history());
    let same_resume = a == epoch_csv(resumed.trainer.history())
        && full.trainer.state.model == resumed.trainer.state.model
        && full.trainer.records() == resumed.trainer.records();
    Outcome {
        id: 11,
        name: "determinism",
        pass: same_csv && same_resume,
        detail: format!(
            "repeat run identical: {same_csv}; resume at epoch {RESUME_AT_EPOCH} identical: {same_resume}"
        ),
    }
}

fn main() {
    let quick = [criterion_1, criterion_2, criterion_3, criterion_5, criterion_6];
    let mut outcomes: Vec<Outcome> = quick.iter().map(|f| f()).collect();

    let runs = thread::scope(|s| {
        let spawn = |name: &'static str| s.spawn(move || train(load(name)));
        let handles = [
            spawn("reference.conf"),
            spawn("bce_baseline.conf"),
            spawn("ablate_rlc.conf"),
            spawn("ablate_mfm.conf"),
            spawn("ablate_htb.conf"),
            spawn("missing_rate_0.conf"),
            spawn("missing_rate_05.conf"),
            spawn("reference.conf"),
        ];
        let resumed = s.spawn(|| train_with_resume(load("reference.conf")));
        let mut runs: Vec<Run> = handles.into_iter().map(|h| h.join().expect("run")).collect();
        runs.push(resumed.join().expect("resumed run"));
        runs
    });
    let [full, bce, no_rlc, no_mfm, no_htb, mr0, mr50, repeat, resumed] =
        <[Run; 9]>::try_from(runs).ok().expect("nine runs");

    for o in [
        criterion_4(&full),
        criterion_7(&full, &bce),
        criterion_8(&full, &[("rlc", &no_rlc), ("mfm", &no_mfm), ("htb", &no_htb)]),
        criterion_9(&mr0, &full, &mr50),
        criterion_10(&full),
        criterion_11(&full, &repeat, &resumed),
    ] {
        outcomes.push(o);
    }
    outcomes.sort_by_key(|o| o.id);
    outcomes.iter().for_each(report);

    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", outcomes.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
