use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use comic_core::losses::{compute_gamma_ht, mfm, MfmConfig};
use comic_core::netcore::{AdditiveAttention, NormalizedHead};
use comic_core::{average_precision, DataConfig, TrainConfig, Trainer};

const CLASSES: usize = 20;
const FEATURES: usize = 64;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(3)
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn losses(c: &mut Criterion) {
    let mut r = rng();
    let p: Vec<f64> = (0..CLASSES).map(|_| r.random_range(0.0..1.0)).collect();
    let y: Vec<u8> = (0..CLASSES).map(|_| r.random_bool(0.2) as u8).collect();
    let counts: Vec<usize> = (0..CLASSES).map(|k| 900 >> (k / 3)).collect();
    let ht = compute_gamma_ht(&counts, 1.0).unwrap();
    let cfg = MfmConfig::default();
    c.bench_function("mfm loss and gradient, 20 classes", |b| {
        b.iter(|| mfm(black_box(&p), black_box(&y), &cfg, &ht).unwrap())
    });
}

fn head(c: &mut Criterion) {
    let mut r = rng();
    let head = NormalizedHead::new(CLASSES, FEATURES, 4, 16.0, 1e-6, &mut r).unwrap();
    let f = vector(&mut r, FEATURES);
    let grad_z = vector(&mut r, CLASSES);
    c.bench_function("normalized head forward", |b| b.iter(|| head.forward(black_box(&f)).unwrap()));
    let logits = head.forward(&f).unwrap();
    c.bench_function("normalized head backward", |b| {
        b.iter_batched_ref(
            || head.zeros_like(),
            |grads| head.backward(black_box(&f), &logits, &grad_z, grads),
            BatchSize::SmallInput,
        )
    });
}

fn attention(c: &mut Criterion) {
    let mut r = rng();
    let att = AdditiveAttention::new(FEATURES, 32, &mut r).unwrap();
    let query = vector(&mut r, FEATURES);
    let keys: Vec<Vec<f64>> = (0..2).map(|_| vector(&mut r, FEATURES)).collect();
    let refs: Vec<&[f64]> = keys.iter().map(|k| k.as_slice()).collect();
    let grad_out = vector(&mut r, FEATURES);
    c.bench_function("attention forward and backward", |b| {
        b.iter_batched_ref(
            || att.zeros_like(),
            |grads| {
                let (_, tape) = att.forward(black_box(&query), &refs).unwrap();
                att.backward(&query, &refs, &tape, &grad_out, grads)
            },
            BatchSize::SmallInput,
        )
    });
}

fn train_step(c: &mut Criterion) {
    let data = DataConfig::default().build().unwrap();
    let mut trainer = Trainer::new(TrainConfig::default(), &data).unwrap();
    let batch: Vec<usize> = (0..32).collect();
    c.bench_function("train step, batch of 32, three models", |b| {
        b.iter(|| trainer.train_step(black_box(&batch)).unwrap())
    });
}

fn ap(c: &mut Criterion) {
    let mut r = rng();
    let scores: Vec<f64> = (0..441).map(|_| r.random_range(0.0..1.0)).collect();
    let labels: Vec<u8> = (0..441).map(|_| r.random_bool(0.1) as u8).collect();
    c.bench_function("average precision, 441 samples", |b| {
        b.iter(|| average_precision(black_box(&scores), black_box(&labels)))
    });
}

criterion_group!(kernels, losses, head, attention, train_step, ap);
criterion_main!(kernels);
