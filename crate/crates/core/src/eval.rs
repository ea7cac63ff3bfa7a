//! Ranking metrics: per-class average precision, shot-group mAP and the
//! recall of hidden labels recovered by correction.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ShotGroup};
use crate::rlc::CorrectionRecord;

/// Non-interpolated average precision. Items are ranked by descending score;
/// equal scores keep their input order. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShotMap {
    pub total: Option<f64>,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl ShotMap {
    pub fn group(&self, g: ShotGroup) -> Option<f64> {
        match g {
            ShotGroup::Many => self.many,
            ShotGroup::Medium => self.medium,
            ShotGroup::Few => self.few,
        }
    }

    /// Mean of the defined group mAPs.
    pub fn average(&self) -> Option<f64> {
        mean(ShotGroup::ALL.iter().filter_map(|&g| self.group(g)))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Unweighted mean AP per shot group and over all classes. Classes with an
/// undefined AP are skipped; an empty group is reported as `None`.
pub fn shot_map(ap: &[Option<f64>], groups: &[ShotGroup]) -> ShotMap {
    assert_eq!(ap.len(), groups.len(), "ap and groups differ in length");
    let in_group = |g: ShotGroup| {
        mean(
            ap.iter()
                .zip(groups)
                .filter(|(_, &gg)| gg == g)
                .filter_map(|(a, _)| *a),
        )
    };
    ShotMap {
        total: mean(ap.iter().filter_map(|a| *a)),
        many: in_group(ShotGroup::Many),
        medium: in_group(ShotGroup::Medium),
        few: in_group(ShotGroup::Few),
    }
}

/// Fraction of hidden positives (`y_full = 1`, `y_obs = 0`) recovered by
/// correction. `None` when nothing was hidden or no oracle labels exist.
pub fn correction_recall(records: &[CorrectionRecord], dataset: &Dataset) -> Option<f64> {
    use std::collections::HashSet;
    let recovered: HashSet<(&str, usize)> = records
        .iter()
        .map(|r| (r.sample_id.as_str(), r.class))
        .collect();
    let (mut hidden, mut found) = (0usize, 0usize);
    for s in &dataset.samples {
        let full = s.y_full.as_ref()?;
        for c in 0..full.len() {
            if full[c] == 1 && s.y_obs[c] == 0 {
                hidden += 1;
                if recovered.contains(&(s.id.as_str(), c)) {
                    found += 1;
                }
            }
        }
    }
    (hidden > 0).then(|| found as f64 / hidden as f64)
}

/// Per-class AP of `scores[i][c]` against the evaluation labels of `dataset`
/// (oracle labels when present, observed labels otherwise).
pub fn per_class_ap(scores: &[Vec<f64>], dataset: &Dataset) -> Vec<Option<f64>> {
    let n_classes = dataset.num_classes();
    (0..n_classes)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
            let l: Vec<u8> = dataset
                .samples
                .iter()
                .map(|smp| smp.y_full.as_ref().unwrap_or(&smp.y_obs)[c])
                .collect();
            average_precision(&s, &l)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: Vec<Option<f64>>,
    pub map_total: Option<f64>,
    pub map_many: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_few: Option<f64>,
    pub map_average: Option<f64>,
    pub correction_recall: Option<f64>,
    pub tp_curve: Vec<usize>,
    pub fp_curve: Vec<usize>,
}

impl MetricsReport {
    pub fn new(ap: Vec<Option<f64>>, groups: &[ShotGroup]) -> Self {
        let m = shot_map(&ap, groups);
        MetricsReport {
            ap,
            map_total: m.total,
            map_many: m.many,
            map_medium: m.medium,
            map_few: m.few,
            map_average: m.average(),
            correction_recall: None,
            tp_curve: Vec::new(),
            fp_curve: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ShotGroup::*;

    #[test]
    fn ap_worked_example() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_ranking_and_all_positive() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1, 0.0], &[1, 1, 0, 0]), Some(1.0));
        assert_eq!(average_precision(&[0.1, 0.7, 0.3], &[1, 1, 1]), Some(1.0));
        assert_eq!(average_precision(&[0.1, 0.7], &[0, 0]), None);
    }

    #[test]
    fn ties_keep_input_order() {
        // Positive listed first wins the tie.
        assert_eq!(average_precision(&[0.5, 0.5], &[1, 0]), Some(1.0));
        assert_eq!(average_precision(&[0.5, 0.5], &[0, 1]), Some(0.5));
    }

    #[test]
    fn group_means() {
        let m = shot_map(&[Some(1.0), Some(0.5)], &[Many, Few]);
        assert_eq!(m.many, Some(1.0));
        assert_eq!(m.few, Some(0.5));
        assert_eq!(m.medium, None);
        assert_eq!(m.total, Some(0.75));
    }

    #[test]
    fn single_group_equals_total() {
        let ap = [Some(0.2), Some(0.9), None, Some(0.4)];
        let m = shot_map(&ap, &[Medium; 4]);
        assert_eq!(m.medium, m.total);
    }

    #[test]
    fn permutation_invariant() {
        let ap = [Some(0.25), Some(0.5), Some(1.0)];
        let g = [Few, Many, Few];
        let a = shot_map(&ap, &g);
        let b = shot_map(&[ap[2], ap[0], ap[1]], &[g[2], g[0], g[1]]);
        assert_eq!(a, b);
    }

    fn rec(id: &str, class: usize) -> CorrectionRecord {
        CorrectionRecord {
            sample_id: id.into(),
            class,
            epoch: 0,
            probability: 0.9,
            threshold: 0.7,
            was_true_positive: None,
        }
    }

    #[test]
    fn recall_counts() {
        use crate::data::Sample;
        let s = |id: &str, obs: Vec<u8>, full: Vec<u8>| Sample {
            id: id.into(),
            x: vec![0.0],
            y_obs: obs,
            y_full: Some(full),
        };
        let ds = Dataset::new(
            3,
            1,
            0.4,
            0,
            vec![s("a", vec![1, 0, 0], vec![1, 1, 1]), s("b", vec![0, 1, 0], vec![1, 1, 1])],
        )
        .unwrap();
        assert_eq!(correction_recall(&[], &ds), Some(0.0));
        let r = [rec("a", 1), rec("a", 2), rec("b", 0)];
        assert_eq!(correction_recall(&r, &ds), Some(0.75));
        let r = [rec("a", 1), rec("a", 2), rec("b", 0), rec("b", 2)];
        assert_eq!(correction_recall(&r, &ds), Some(1.0));
    }
}
