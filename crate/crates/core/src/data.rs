//! Partially-labeled, long-tailed multi-label datasets.
//!
//! Datasets are either generated synthetically ([`generate_synthetic`]) and then
//! masked ([`mask_labels`]) or loaded from the JSON-lines format written by
//! [`Dataset::save`]. The first line of a file is the manifest header, every
//! following line is one sample.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Smallest per-class target count produced by the generator.
pub const MIN_CLASS_COUNT: usize = 3;

/// Classes with more than this many positives are "many shot".
pub const MANY_SHOT_ABOVE: usize = 100;
/// Classes with fewer than this many positives are "few shot".
pub const FEW_SHOT_BELOW: usize = 20;

/// One training example: a feature vector and its (partial) label vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub x: Vec<f64>,
    /// 1 = annotated present, 0 = unknown.
    pub y_obs: Vec<u8>,
    /// Oracle labels, only known for constructed data.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub y_full: Option<Vec<u8>>,
}

impl Sample {
    pub fn num_observed(&self) -> usize {
        self.y_obs.iter().filter(|&&v| v == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotGroup {
    Many,
    Medium,
    Few,
}

impl ShotGroup {
    pub const ALL: [ShotGroup; 3] = [ShotGroup::Many, ShotGroup::Medium, ShotGroup::Few];

    pub fn for_count(count: usize) -> ShotGroup {
        if count > MANY_SHOT_ABOVE {
            ShotGroup::Many
        } else if count >= FEW_SHOT_BELOW {
            ShotGroup::Medium
        } else {
            ShotGroup::Few
        }
    }
}

impl fmt::Display for ShotGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShotGroup::Many => "many",
            ShotGroup::Medium => "medium",
            ShotGroup::Few => "few",
        };
        f.write_str(s)
    }
}

/// Map per-class positive counts to shot groups.
pub fn assign_shot_groups(class_counts: &[usize]) -> Vec<ShotGroup> {
    class_counts.iter().map(|&c| ShotGroup::for_count(c)).collect()
}

/// Header line of the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    #[serde(rename = "C")]
    num_classes: usize,
    d: usize,
    missing_rate: f64,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Observed-positive counts per class (the static class distribution).
    pub class_counts: Vec<usize>,
    pub shot_groups: Vec<ShotGroup>,
    pub missing_rate: f64,
    pub seed: u64,
}

impl DatasetManifest {
    fn from_samples(
        num_classes: usize,
        feature_dim: usize,
        missing_rate: f64,
        seed: u64,
        samples: &[Sample],
    ) -> Self {
        let class_counts = observed_counts(num_classes, samples);
        let shot_groups = assign_shot_groups(&class_counts);
        DatasetManifest {
            num_classes,
            feature_dim,
            class_counts,
            shot_groups,
            missing_rate,
            seed,
        }
    }
}

fn observed_counts(num_classes: usize, samples: &[Sample]) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for s in samples {
        for (c, &v) in s.y_obs.iter().enumerate() {
            counts[c] += v as usize;
        }
    }
    counts
}

/// An immutable collection of samples with its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Build a dataset, validating every sample and deriving the manifest counts.
    pub fn new(
        num_classes: usize,
        feature_dim: usize,
        missing_rate: f64,
        seed: u64,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            validate_sample(s, num_classes, feature_dim)
                .map_err(|(field, reason)| Error::Parse {
                    path: "<memory>".into(),
                    line: i + 1,
                    field,
                    reason,
                })?;
        }
        let manifest =
            DatasetManifest::from_samples(num_classes, feature_dim, missing_rate, seed, &samples);
        Ok(Dataset { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.manifest.feature_dim
    }

    pub fn has_oracle_labels(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.y_full.is_some())
    }

    /// Deterministic train/test split: every `period`-th sample (index ≡ period-1)
    /// goes to the test side.
    pub fn split(&self, period: usize) -> (Dataset, Dataset) {
        let period = period.max(2);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, s) in self.samples.iter().enumerate() {
            if i % period == period - 1 {
                test.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        let m = &self.manifest;
        let make = |samples: Vec<Sample>| Dataset {
            manifest: DatasetManifest::from_samples(
                m.num_classes,
                m.feature_dim,
                m.missing_rate,
                m.seed,
                &samples,
            ),
            samples,
        };
        (make(train), make(test))
    }

    /// Canonical JSON-lines serialization.
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            num_classes: self.manifest.num_classes,
            d: self.manifest.feature_dim,
            missing_rate: self.manifest.missing_rate,
            seed: self.manifest.seed,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, &path.display().to_string())
    }

    /// Parse the JSON-lines format. `origin` is used in error messages.
    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self> {
        let parse_err = |line: usize, field: &str, reason: String| Error::Parse {
            path: origin.to_string(),
            line,
            field: field.to_string(),
            reason,
        };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| parse_err(1, "header", "empty file".into()))?;
        let header: Header = serde_json::from_str(first)
            .map_err(|e| parse_err(1, "header", e.to_string()))?;

        let mut samples = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(line)
                .map_err(|e| parse_err(lineno, "<row>", e.to_string()))?;
            let sample = sample_from_value(&value)
                .map_err(|(field, reason)| parse_err(lineno, &field, reason))?;
            validate_sample(&sample, header.num_classes, header.d)
                .map_err(|(field, reason)| parse_err(lineno, &field, reason))?;
            samples.push(sample);
        }
        Ok(Dataset {
            manifest: DatasetManifest::from_samples(
                header.num_classes,
                header.d,
                header.missing_rate,
                header.seed,
                &samples,
            ),
            samples,
        })
    }
}

type FieldError = (String, String);

fn sample_from_value(v: &Value) -> std::result::Result<Sample, FieldError> {
    let obj = v
        .as_object()
        .ok_or_else(|| ("<row>".to_string(), "expected a JSON object".to_string()))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(("id".into(), "expected a string".into())),
        None => return Err(("id".into(), "missing".into())),
    };
    let x = obj
        .get("x")
        .ok_or_else(|| ("x".to_string(), "missing".to_string()))?
        .as_array()
        .ok_or_else(|| ("x".to_string(), "expected an array".to_string()))?
        .iter()
        .map(|e| e.as_f64().ok_or_else(|| ("x".to_string(), "non-numeric entry".to_string())))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let y_obs = label_vector(obj.get("y_obs"), "y_obs")?
        .ok_or_else(|| ("y_obs".to_string(), "missing".to_string()))?;
    let y_full = label_vector(obj.get("y_full"), "y_full")?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "id" | "x" | "y_obs" | "y_full") {
            return Err((key.clone(), "unknown field".into()));
        }
    }
    Ok(Sample {
        id,
        x,
        y_obs,
        y_full,
    })
}

fn label_vector(
    v: Option<&Value>,
    field: &str,
) -> std::result::Result<Option<Vec<u8>>, FieldError> {
    let Some(v) = v else { return Ok(None) };
    if v.is_null() {
        return Ok(None);
    }
    let arr = v
        .as_array()
        .ok_or_else(|| (field.to_string(), "expected an array".to_string()))?;
    arr.iter()
        .map(|e| match e.as_u64() {
            Some(0) => Ok(0u8),
            Some(1) => Ok(1u8),
            _ => Err((field.to_string(), format!("label must be 0 or 1, got {e}"))),
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Some)
}

fn validate_sample(s: &Sample, num_classes: usize, d: usize) -> std::result::Result<(), FieldError> {
    if s.x.len() != d {
        return Err(("x".into(), format!("length {} != d = {d}", s.x.len())));
    }
    if s.x.iter().any(|v| !v.is_finite()) {
        return Err(("x".into(), "non-finite feature".into()));
    }
    if s.y_obs.len() != num_classes {
        return Err((
            "y_obs".into(),
            format!("length {} != C = {num_classes}", s.y_obs.len()),
        ));
    }
    if let Some(full) = &s.y_full {
        if full.len() != num_classes {
            return Err((
                "y_full".into(),
                format!("length {} != C = {num_classes}", full.len()),
            ));
        }
        if s.y_obs.iter().zip(full).any(|(&o, &f)| o > f) {
            return Err(("y_obs".into(), "observed positive absent from y_full".into()));
        }
        if !full.contains(&1) {
            return Err(("y_full".into(), "no positive class".into()));
        }
    }
    Ok(())
}

/// Parameters of the synthetic long-tail generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub n_max: usize,
    pub decay: f64,
    pub noise: f64,
    pub seed: u64,
}

/// Per-class target positive counts `round(n_max * decay^c)`, floored at
/// [`MIN_CLASS_COUNT`].
pub fn target_counts(num_classes: usize, n_max: usize, decay: f64) -> Result<Vec<usize>> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::invalid("decay", format!("{decay} is outside (0, 1]")));
    }
    if num_classes < 2 {
        return Err(Error::invalid("C", format!("need at least 2 classes, got {num_classes}")));
    }
    if n_max < 20 {
        return Err(Error::invalid("n_max", format!("need n_max >= 20, got {n_max}")));
    }
    let mut counts = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let raw = (n_max as f64 * decay.powi(c as i32)).round() as usize;
        if raw == 0 {
            return Err(Error::invalid(
                "decay",
                format!("class {c} has a target count that rounds to 0 (degenerate tail)"),
            ));
        }
        counts.push(raw.max(MIN_CLASS_COUNT));
    }
    Ok(counts)
}

// Probability of drawing 1, 2, 3, 4 labels for one sample.
const LABELS_PER_SAMPLE: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

/// Generate a fully-labeled long-tailed dataset. Feature vectors are sums of
/// random unit-norm class prototypes plus isotropic Gaussian noise.
pub fn generate_synthetic(p: &SyntheticParams) -> Result<Dataset> {
    if p.feature_dim == 0 {
        return Err(Error::invalid("d", "feature dimension must be positive"));
    }
    if !(p.noise >= 0.0 && p.noise.is_finite()) {
        return Err(Error::invalid("noise", format!("{} must be finite and >= 0", p.noise)));
    }
    let targets = target_counts(p.num_classes, p.n_max, p.decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let prototypes: Vec<Vec<f64>> = (0..p.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..p.feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|a| a / norm).collect()
        })
        .collect();

    // Draw label sets until every class has reached its target. Classes are
    // drawn without replacement weighted by their remaining count.
    let mut remaining = targets.clone();
    let mut label_sets: Vec<Vec<usize>> = Vec::new();
    while remaining.iter().any(|&r| r > 0) {
        let u: f64 = rng.random();
        let mut k = LABELS_PER_SAMPLE.len();
        let mut acc = 0.0;
        for (i, &w) in LABELS_PER_SAMPLE.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i + 1;
                break;
            }
        }
        let available = remaining.iter().filter(|&&r| r > 0).count();
        let k = k.min(available);
        let mut chosen = Vec::with_capacity(k);
        for _ in 0..k {
            let total: usize = remaining
                .iter()
                .enumerate()
                .filter(|(c, _)| !chosen.contains(c))
                .map(|(_, &r)| r)
                .sum();
            let mut pick = rng.random_range(0..total);
            for (c, &r) in remaining.iter().enumerate() {
                if chosen.contains(&c) {
                    continue;
                }
                if pick < r {
                    chosen.push(c);
                    break;
                }
                pick -= r;
            }
        }
        for &c in &chosen {
            remaining[c] -= 1;
        }
        chosen.sort_unstable();
        label_sets.push(chosen);
    }
    label_sets.shuffle(&mut rng);

    let samples = label_sets
        .into_iter()
        .enumerate()
        .map(|(i, classes)| {
            let mut x = vec![0.0; p.feature_dim];
            for &c in &classes {
                for (xi, pi) in x.iter_mut().zip(&prototypes[c]) {
                    *xi += pi;
                }
            }
            for xi in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *xi += p.noise * z;
            }
            let mut y = vec![0u8; p.num_classes];
            for &c in &classes {
                y[c] = 1;
            }
            Sample {
                id: format!("s{i:05}"),
                x,
                y_obs: y.clone(),
                y_full: Some(y),
            }
        })
        .collect::<Vec<_>>();

    Dataset::new(p.num_classes, p.feature_dim, 0.0, p.seed, samples)
}

/// Hide each positive label independently with probability `missing_rate`,
/// always keeping at least one observed positive per sample.
pub fn mask_labels(ds: &Dataset, missing_rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::invalid(
            "missing_rate",
            format!("{missing_rate} is outside [0, 1)"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut samples = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let full = s.y_full.as_ref().ok_or_else(|| {
            Error::invalid("y_full", format!("sample {} has no oracle labels", s.id))
        })?;
        let positives: Vec<usize> = (0..full.len()).filter(|&c| full[c] == 1).collect();
        let mut y_obs = vec![0u8; full.len()];
        for &c in &positives {
            if rng.random::<f64>() >= missing_rate {
                y_obs[c] = 1;
            }
        }
        if !y_obs.contains(&1) && !positives.is_empty() {
            let keep = positives[rng.random_range(0..positives.len())];
            y_obs[keep] = 1;
        }
        samples.push(Sample {
            id: s.id.clone(),
            x: s.x.clone(),
            y_obs,
            y_full: Some(full.clone()),
        });
    }
    Dataset::new(
        ds.num_classes(),
        ds.feature_dim(),
        missing_rate,
        ds.manifest.seed,
        samples,
    )
}
