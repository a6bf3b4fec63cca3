//! Evaluation: per-label average precision, per-group mAP, sample F1,
//! accuracy, and deltas against a named baseline report.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelPartition};
use crate::model::{ModelError, ModelParams};
use crate::scalar::Real;

/// Decision threshold for F1 and accuracy.
pub const THRESHOLD: f64 = 0.5;

/// Average precision of one label column. `None` when the column has no
/// positives (AP undefined; the label is excluded from its group's mAP).
///
/// Ranking is by descending score; ties break toward the lower original
/// index so the result is deterministic.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

/// Instance-averaged F1 of thresholded predictions restricted to `subset`.
/// An instance with neither true nor predicted positives in the subset
/// scores F1 = 1.
pub fn sample_f1(
    score_rows: &[Vec<f64>],
    label_rows: &[&[u8]],
    subset: &[usize],
    threshold: f64,
) -> f64 {
    let mut total = 0.0;
    for (scores, labels) in score_rows.iter().zip(label_rows) {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fneg = 0usize;
        for &t in subset {
            let pred = scores[t] > threshold;
            let truth = labels[t] == 1;
            match (pred, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        total += if tp + fp + fneg == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
        };
    }
    total / score_rows.len() as f64
}

fn accuracy(score_rows: &[Vec<f64>], label_rows: &[&[u8]], subset: &[usize], threshold: f64) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (scores, labels) in score_rows.iter().zip(label_rows) {
        for &t in subset {
            let pred = scores[t] > threshold;
            let truth = labels[t] == 1;
            if pred == truth {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total as f64
}

/// Per-group metric summary. All headline metrics are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub map_p: f64,
    pub map_np: f64,
    pub sample_f1_p: f64,
    pub sample_f1_np: f64,
    pub accuracy_p: f64,
    pub accuracy_np: f64,
    /// Percent AP per label; `None` for labels with no test positives.
    pub per_label_ap: Vec<Option<f64>>,
    pub delta_map_p: Option<f64>,
    pub delta_map_np: Option<f64>,
    /// Labels excluded from mAP for lack of test positives.
    pub excluded_labels: Vec<usize>,
    /// Instances hitting the empty-prediction F1 = 1 convention, per group.
    pub empty_f1_instances_p: usize,
    pub empty_f1_instances_np: usize,
}

impl MetricsReport {
    /// One-row plain-text table in the mAP / F1 / Acc × P / P̄ layout.
    pub fn render_row(&self, name: &str) -> String {
        let delta = |d: Option<f64>| d.map_or_else(|| "   -  ".to_string(), |v| format!("{v:+6.2}"));
        format!(
            "{name:<28} {:>7.2} {:>7.2} {:>9.2} {:>9.2} {:>7.2} {:>7.2} {:>9} {:>9}",
            self.map_p,
            self.map_np,
            self.sample_f1_p,
            self.sample_f1_np,
            self.accuracy_p,
            self.accuracy_np,
            delta(self.delta_map_p),
            delta(self.delta_map_np),
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:<28} {:>7} {:>7} {:>9} {:>9} {:>7} {:>7} {:>9} {:>9}",
            "Method", "mAP(P)", "mAP(P̄)", "F1(P)", "F1(P̄)", "Acc(P)", "Acc(P̄)", "ΔmAP(P)", "ΔmAP(P̄)"
        )
    }
}

fn group_map(per_label_ap: &[Option<f64>], group: &[usize]) -> f64 {
    let included: Vec<f64> = group.iter().filter_map(|&t| per_label_ap[t]).collect();
    if included.is_empty() {
        return 0.0;
    }
    included.iter().sum::<f64>() / included.len() as f64
}

fn count_empty_f1(score_rows: &[Vec<f64>], label_rows: &[&[u8]], subset: &[usize]) -> usize {
    score_rows
        .iter()
        .zip(label_rows)
        .filter(|(scores, labels)| {
            subset
                .iter()
                .all(|&t| scores[t] <= THRESHOLD && labels[t] == 0)
        })
        .count()
}

/// Scores the model on the dataset and assembles the full report.
/// Delta columns are present iff a baseline report is given.
pub fn evaluate<T: Real>(
    model: &ModelParams<T>,
    dataset: &Dataset<T>,
    partition: &LabelPartition,
    baseline: Option<&MetricsReport>,
) -> Result<MetricsReport, ModelError> {
    let n = dataset.n_instances();
    let t = dataset.n_labels();
    let mut score_rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let scores = model.forward(dataset.features(i))?;
        score_rows.push(scores.as_slice().iter().map(|v| v.to_f64().unwrap()).collect());
    }
    let label_rows: Vec<&[u8]> = (0..n).map(|i| dataset.labels(i)).collect();

    let mut per_label_ap = Vec::with_capacity(t);
    let mut excluded_labels = Vec::new();
    for label in 0..t {
        let col_scores: Vec<f64> = score_rows.iter().map(|r| r[label]).collect();
        let col_labels: Vec<u8> = label_rows.iter().map(|r| r[label]).collect();
        match average_precision(&col_scores, &col_labels) {
            Some(ap) => per_label_ap.push(Some(100.0 * ap)),
            None => {
                excluded_labels.push(label);
                per_label_ap.push(None);
            }
        }
    }

    let map_p = group_map(&per_label_ap, &partition.privileged);
    let map_np = group_map(&per_label_ap, &partition.non_privileged);
    let f1 = |subset: &[usize]| {
        if subset.is_empty() {
            0.0
        } else {
            100.0 * sample_f1(&score_rows, &label_rows, subset, THRESHOLD)
        }
    };
    let acc = |subset: &[usize]| {
        if subset.is_empty() {
            0.0
        } else {
            100.0 * accuracy(&score_rows, &label_rows, subset, THRESHOLD)
        }
    };

    Ok(MetricsReport {
        format_version: 1,
        map_p,
        map_np,
        sample_f1_p: f1(&partition.privileged),
        sample_f1_np: f1(&partition.non_privileged),
        accuracy_p: acc(&partition.privileged),
        accuracy_np: acc(&partition.non_privileged),
        delta_map_p: baseline.map(|b| map_p - b.map_p),
        delta_map_np: baseline.map(|b| map_np - b.map_np),
        empty_f1_instances_p: count_empty_f1(&score_rows, &label_rows, &partition.privileged),
        empty_f1_instances_np: count_empty_f1(&score_rows, &label_rows, &partition.non_privileged),
        per_label_ap,
        excluded_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadParams;
    use proptest::prelude::*;

    #[test]
    fn perfect_ranking_gives_one() {
        let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn ap_hand_value() {
        let ap = average_precision(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_positive_instance_is_one() {
        assert_eq!(average_precision(&[0.01], &[1]).unwrap(), 1.0);
    }

    #[test]
    fn no_positive_is_undefined() {
        assert!(average_precision(&[0.5, 0.4], &[0, 0]).is_none());
    }

    #[test]
    fn ap_tie_break_is_deterministic() {
        // Two tied scores: lower index ranked first.
        let a = average_precision(&[0.5, 0.5, 0.1], &[1, 0, 0]).unwrap();
        let b = average_precision(&[0.5, 0.5, 0.1], &[0, 1, 0]).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(b, 0.5);
    }

    #[test]
    fn sample_f1_hand_values() {
        let scores = vec![vec![0.9, 0.9]];
        let labels_row: &[u8] = &[1, 0];
        let f1 = sample_f1(&scores, &[labels_row], &[0, 1], 0.5);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);

        // Perfect match: 1.0.
        let scores = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        let rows: Vec<&[u8]> = vec![&[1, 0], &[0, 1]];
        assert_eq!(sample_f1(&scores, &rows, &[0, 1], 0.5), 1.0);

        // Empty-set convention.
        let scores = vec![vec![0.1, 0.2]];
        let rows: Vec<&[u8]> = vec![&[0, 0]];
        assert_eq!(sample_f1(&scores, &rows, &[0, 1], 0.5), 1.0);
    }

    #[test]
    fn accuracy_of_exact_predictions_is_full() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let rows: Vec<&[u8]> = vec![&[1, 0], &[0, 1]];
        assert_eq!(accuracy(&scores, &rows, &[0, 1], 0.5), 1.0);
    }

    fn fixture_model_and_data() -> (ModelParams<f64>, Dataset<f64>, LabelPartition) {
        // 4 instances, 3 labels, 2 features; scores depend on features.
        let model = ModelParams {
            heads: vec![
                HeadParams::Linear { weights: vec![1.0, 0.0], bias: 0.0 },
                HeadParams::Linear { weights: vec![0.0, 1.0], bias: 0.0 },
                HeadParams::Linear { weights: vec![1.0, -1.0], bias: 0.1 },
            ],
        };
        let features = vec![
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![0.5, 0.5],
            vec![-0.5, -0.5],
        ];
        let labels = vec![
            vec![1, 0, 1],
            vec![0, 1, 0],
            vec![1, 1, 0],
            vec![0, 0, 1],
        ];
        let ds = Dataset::new(features, labels, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let part = LabelPartition {
            privileged: vec![0],
            non_privileged: vec![1, 2],
            frequencies: vec![2, 2, 2],
        };
        (model, ds, part)
    }

    #[test]
    fn evaluate_is_pure_and_self_delta_is_zero() {
        let (model, ds, part) = fixture_model_and_data();
        let r1 = evaluate(&model, &ds, &part, None).unwrap();
        let r2 = evaluate(&model, &ds, &part, None).unwrap();
        assert_eq!(r1, r2);
        let with_delta = evaluate(&model, &ds, &part, Some(&r1)).unwrap();
        assert_eq!(with_delta.delta_map_p, Some(0.0));
        assert_eq!(with_delta.delta_map_np, Some(0.0));
    }

    #[test]
    fn group_map_matches_per_label_mean() {
        let (model, ds, part) = fixture_model_and_data();
        let r = evaluate(&model, &ds, &part, None).unwrap();
        let mean_np: f64 = part
            .non_privileged
            .iter()
            .filter_map(|&t| r.per_label_ap[t])
            .sum::<f64>()
            / part.non_privileged.len() as f64;
        assert!((r.map_np - mean_np).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_transform(
            scores in proptest::collection::vec(0.01f64..0.99, 4..10),
            bits in proptest::collection::vec(0u8..2, 4..10),
        ) {
            let n = scores.len().min(bits.len());
            let scores = &scores[..n];
            let bits = &bits[..n];
            prop_assume!(bits.iter().any(|&b| b == 1));
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
            let a = average_precision(scores, bits);
            let b = average_precision(&transformed, bits);
            prop_assert_eq!(a, b);
        }
    }
}
