use serde_json::Value;

use comic_core::netcore::ParamSet;
use comic_core::trainer::{epoch_csv, ArchConfig, Checkpoint, TrainConfig, Trainer, EPOCH_CSV_HEADER};
use comic_core::{DataConfig, Dataset, Error, LossKind};

fn small_data() -> DataConfig {
    DataConfig {
        classes: 6,
        dim: 8,
        n_max: 80,
        decay: 0.6,
        noise: 0.3,
        missing_rate: 0.4,
        seed: 11,
    }
}

fn small_dataset() -> Dataset {
    small_data().build().unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 16,
        learning_rate: 5e-3,
        warmup_epochs: 1,
        tau: 0.6,
        arch: ArchConfig {
            hidden: vec![16],
            feature_dim: 8,
            groups: 2,
            rho: 16.0,
            eta: 1e-6,
            attention_hidden: 8,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_step_logs() {
    let ds = small_dataset();
    let run = || {
        let mut t = Trainer::new(small_config(), &ds).unwrap();
        let n = t.train_split().len();
        let batches: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(16).map(|c| c.to_vec()).collect();
        let mut losses = Vec::new();
        for epoch in 0..3 {
            t.state.epoch = epoch;
            for b in &batches {
                let m = t.train_step(b).unwrap();
                losses.push((m.loss_total, m.loss_rlc, m.loss_mfm, m.loss_htb, m.new_corrections));
            }
        }
        losses
    };
    assert_eq!(run(), run());

    let a = comic_core::fit(small_config(), &ds).unwrap();
    let b = comic_core::fit(small_config(), &ds).unwrap();
    assert_eq!(epoch_csv(a.history()), epoch_csv(b.history()));
    assert_eq!(a.correction_log(), b.correction_log());
    let other = comic_core::fit(TrainConfig { seed: 8, ..small_config() }, &ds).unwrap();
    assert_ne!(epoch_csv(a.history()), epoch_csv(other.history()));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let ds = small_dataset();
    let trainer = comic_core::fit(TrainConfig { epochs: 3, ..small_config() }, &ds).unwrap();
    let ckpt = trainer.checkpoint();
    assert_eq!(Checkpoint::from_json(&ckpt.to_json()).unwrap(), ckpt);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = small_dataset();
    let straight = comic_core::fit(small_config(), &ds).unwrap();

    let mut first = Trainer::new(small_config(), &ds).unwrap();
    for _ in 0..3 {
        first.run_epoch().unwrap();
    }
    let text = first.checkpoint().to_json();
    let mut resumed = Trainer::restore(Checkpoint::from_json(&text).unwrap(), &ds).unwrap();
    resumed.run(|_, _| Ok(())).unwrap();

    assert_eq!(resumed.history(), straight.history());
    assert_eq!(resumed.state.model, straight.state.model);
    assert_eq!(resumed.state.adam, straight.state.adam);
    assert_eq!(resumed.records(), straight.records());
}

fn edit(json: &str, f: impl FnOnce(&mut Value)) -> String {
    let mut v: Value = serde_json::from_str(json).unwrap();
    f(&mut v);
    v.to_string()
}

fn field_of(result: Result<Trainer, Error>) -> String {
    match result {
        Err(Error::Checkpoint { field, .. }) => field,
        Err(other) => panic!("expected a checkpoint error, got {other}"),
        Ok(_) => panic!("expected a checkpoint error"),
    }
}

#[test]
fn corrupt_checkpoints_name_the_field() {
    let ds = small_dataset();
    let trainer = comic_core::fit(TrainConfig { epochs: 1, ..small_config() }, &ds).unwrap();
    let good = trainer.checkpoint().to_json();
    let load = |text: String| Checkpoint::from_json(&text).and_then(|c| Trainer::restore(c, &ds));

    let no_version = edit(&good, |v| {
        v.as_object_mut().unwrap().remove("version");
    });
    assert_eq!(field_of(load(no_version)), "version");

    let future = edit(&good, |v| v["version"] = Value::from(99));
    assert_eq!(field_of(load(future)), "version");

    let no_adam = edit(&good, |v| {
        v["state"].as_object_mut().unwrap().remove("adam");
    });
    assert_eq!(field_of(load(no_adam)), "state.adam");

    let truncated = edit(&good, |v| {
        v["state"]["model"]["tail"]["backbone"]["layers"][0]["weight"]["data"]
            .as_array_mut()
            .unwrap()
            .pop();
    });
    assert_eq!(field_of(load(truncated)), "model.tail");

    let wrong_hash = edit(&good, |v| v["dataset_hash"] = Value::from("00"));
    assert_eq!(field_of(load(wrong_hash)), "dataset_hash");

    assert_eq!(field_of(load("[]".into())), "<root>");
}

#[test]
fn restore_refuses_a_different_dataset() {
    let ds = small_dataset();
    let trainer = comic_core::fit(TrainConfig { epochs: 1, ..small_config() }, &ds).unwrap();
    let other = DataConfig { seed: 12, ..small_data() }.build().unwrap();
    assert_eq!(field_of(Trainer::restore(trainer.checkpoint(), &other)), "dataset_hash");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = small_dataset();
    let mut t = Trainer::new(TrainConfig { learning_rate: 0.0, ..small_config() }, &ds).unwrap();
    let before = t.state.model.clone();
    let m = t.train_step(&[0, 1, 2, 3]).unwrap();
    assert!(m.loss_total > 0.0);
    assert_eq!(t.state.model, before);
    assert_eq!(t.state.adam.t, 1);
}

#[test]
fn epoch_losses_decompose_into_weighted_terms() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        lambda_c: 0.5,
        lambda_m: 2.0,
        lambda_b: 0.7,
        ..small_config()
    };
    let t = comic_core::fit(cfg, &ds).unwrap();
    for h in t.history() {
        let sum = 0.5 * h.loss_rlc + 2.0 * h.loss_mfm + 0.7 * h.loss_htb;
        assert!((h.loss_total - sum).abs() <= 1e-12 * h.loss_total.abs().max(1.0), "{h:?}");
        assert!(h.loss_rlc > 0.0 && h.loss_htb > 0.0);
    }
    assert!(t.history().iter().any(|h| h.corrections > 0));
}

#[test]
fn disabling_correction_and_balancing_leaves_only_the_classification_term() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        use_rlc: false,
        use_htb: false,
        lambda_m: 1.5,
        ..small_config()
    };
    let t = comic_core::fit(cfg, &ds).unwrap();
    for h in t.history() {
        assert_eq!(h.loss_rlc, 0.0);
        assert_eq!(h.loss_htb, 0.0);
        assert_eq!(h.corrections, 0);
        assert!((h.loss_total - 1.5 * h.loss_mfm).abs() <= 1e-12 * h.loss_total);
        assert!(h.loss_head.is_none() && h.loss_tail.is_none());
    }
    assert!(t.records().is_empty());
}

// Written out independently of the library: tanh MLP, grouped cosine head,
// per-class focal terms with clamped probabilities.
fn reference_logits(model: &comic_core::TriModel, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let layers = &model.balanced.backbone.layers;
    for (li, layer) in layers.iter().enumerate() {
        let w = &layer.weight;
        let mut out = layer.bias.clone();
        for r in 0..w.rows {
            for c in 0..w.cols {
                out[r] += w.data[r * w.cols + c] * a[c];
            }
        }
        if li + 1 < layers.len() {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        a = out;
    }
    let head = &model.balanced.head;
    let fnorm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let gw = a.len() / head.groups;
    (0..head.weight.rows)
        .map(|c| {
            let mut z = 0.0;
            for k in 0..head.groups {
                let w = &head.weight.data[c * head.weight.cols + k * gw..c * head.weight.cols + (k + 1) * gw];
                let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dotp: f64 = w.iter().zip(&a[k * gw..(k + 1) * gw]).map(|(p, q)| p * q).sum();
                z += dotp / ((wn + head.eta) * fnorm);
            }
            head.rho / head.groups as f64 * z
        })
        .collect()
}

#[test]
fn single_model_step_matches_reference_loss() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        use_rlc: false,
        use_htb: false,
        ..small_config()
    };
    let mut t = Trainer::new(cfg.clone(), &ds).unwrap();
    let counts = t.train_split().manifest.class_counts.clone();
    let max = *counts.iter().max().unwrap() as f64;
    let m = cfg.mfm;
    let batch: Vec<usize> = (0..12).collect();
    for _ in 0..3 {
        let model = t.state.model.clone();
        let mut expected = 0.0;
        for &i in &batch {
            let s = &t.train_split().samples[i];
            let z = reference_logits(&model, &s.x);
            for c in 0..z.len() {
                let ht = 1.0 + cfg.gamma_ht_scale * (1.0 - counts[c] as f64 / max);
                let p = (1.0 / (1.0 + (-z[c]).exp())).clamp(1e-6, 1.0 - 1e-6);
                expected += if s.y_obs[c] == 1 {
                    let g = (m.gamma_pn_pos + m.w_pos * ht).max(0.0);
                    -(1.0 - p).powf(g) * p.ln()
                } else {
                    let g = (m.gamma_pn_neg + m.w_neg * ht).max(0.0);
                    -p.powf(g) * (1.0 - p).ln()
                };
            }
        }
        expected /= batch.len() as f64;
        let got = t.train_step(&batch).unwrap();
        assert!((got.loss_total - expected).abs() < 1e-10 * expected, "{} vs {expected}", got.loss_total);
    }
}

#[test]
fn bce_loss_kind_is_plain_cross_entropy() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        loss: LossKind::Bce,
        ..TrainConfig::bce_baseline()
    };
    let mut t = Trainer::new(TrainConfig { arch: small_config().arch, ..cfg }, &ds).unwrap();
    let model = t.state.model.clone();
    let s = t.train_split().samples[0].clone();
    let z = reference_logits(&model, &s.x);
    let expected: f64 = z
        .iter()
        .zip(&s.y_obs)
        .map(|(&v, &y)| {
            let p = (1.0 / (1.0 + (-v).exp())).clamp(1e-6, 1.0 - 1e-6);
            if y == 1 { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum();
    let got = t.train_step(&[0]).unwrap().loss_total;
    assert!((got - expected).abs() < 1e-10 * expected);
}

#[test]
fn non_finite_loss_aborts_with_batch_ids() {
    let ds = small_dataset();
    let mut t = Trainer::new(small_config(), &ds).unwrap();
    t.state.model.balanced.head.weight.data[0] = f64::NAN;
    let id = t.train_split().samples[2].id.clone();
    match t.train_step(&[2]) {
        Err(Error::NonFinite { detail, .. }) => {
            assert!(detail.contains(&id), "{detail}");
            assert!(detail.contains("config="), "{detail}");
        }
        other => panic!("expected a non-finite error, got {:?}", other.map(|m| m.loss_total)),
    }
}

#[test]
fn zero_epochs_give_empty_history() {
    let ds = small_dataset();
    let t = comic_core::fit(TrainConfig { epochs: 0, ..small_config() }, &ds).unwrap();
    assert!(t.history().is_empty());
    assert_eq!(epoch_csv(t.history()), format!("{EPOCH_CSV_HEADER}\n"));
}

#[test]
fn learning_rate_schedules_differ_per_model() {
    let ds = small_dataset();
    let mut t = Trainer::new(small_config(), &ds).unwrap();
    t.state.epoch = 10;
    let before = t.state.model.clone();
    t.train_step(&[0, 1, 2, 3]).unwrap();
    // First Adam step moves each parameter by about its learning rate.
    let max_move = |a: &comic_core::trainer::Branch, b: &comic_core::trainer::Branch| {
        a.flatten()
            .iter()
            .zip(b.flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let lr = small_config().learning_rate;
    let head = max_move(&before.head, &t.state.model.head);
    let tail = max_move(&before.tail, &t.state.model.tail);
    let balanced = max_move(&before.balanced, &t.state.model.balanced);
    assert!((head - lr * 0.9f64.powi(10)).abs() < 1e-3 * lr, "{head}");
    assert!((tail - lr).abs() < 1e-3 * lr, "{tail}");
    assert!((balanced - lr * 0.97f64.powi(10)).abs() < 1e-3 * lr, "{balanced}");
}
