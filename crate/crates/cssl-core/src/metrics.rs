//! Binary-classification metrics: accuracy, F1, and rank-based AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }
}

/// One evaluated run. `auc` is absent when the test set has a single class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub auc: Option<f64>,
    pub f1: f64,
    pub confusion: ConfusionCounts,
    /// Per-epoch fine-tune accuracy curve, when recorded.
    pub curve: Vec<EpochAcc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochAcc {
    pub epoch: usize,
    pub acc: f64,
}

impl MetricsReport {
    /// Table-shaped row: method, domain order, ACC, AUC, F1.
    pub fn table_row(&self, method: &str, order: &str) -> String {
        let auc = self
            .auc
            .map_or_else(|| "  n/a".to_string(), |a| format!("{a:.3}"));
        format!(
            "{method:<16} {order:<10} {acc:.3} {auc} {f1:.3}",
            acc = self.acc,
            f1 = self.f1
        )
    }
}

pub fn confusion_counts(predictions: &[u8], labels: &[u8]) -> ConfusionCounts {
    let mut counts = ConfusionCounts::default();
    for (&p, &y) in predictions.iter().zip(labels.iter()) {
        match (y, p) {
            (1, 1) => counts.true_positive += 1,
            (0, 1) => counts.false_positive += 1,
            (0, 0) => counts.true_negative += 1,
            (1, 0) => counts.false_negative += 1,
            _ => unreachable!("binary labels only"),
        }
    }
    counts
}

pub fn accuracy(counts: &ConfusionCounts) -> f64 {
    if counts.total() == 0 {
        return 0.0;
    }
    (counts.true_positive + counts.true_negative) as f64 / counts.total() as f64
}

/// F1 on the positive class: harmonic mean of precision and recall, 0 when
/// undefined.
pub fn f1_score(counts: &ConfusionCounts) -> f64 {
    let precision_den = counts.true_positive + counts.false_positive;
    let recall_den = counts.true_positive + counts.false_negative;
    if precision_den == 0 || recall_den == 0 {
        return 0.0;
    }
    let p = counts.true_positive as f64 / precision_den as f64;
    let r = counts.true_positive as f64 / recall_den as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// AUC as the Mann-Whitney rank statistic with ties counted half. `None`
/// when only one class is present.
pub fn auc_rank(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    // Average ranks over tie groups (1-based ranks).
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(ranks.iter())
        .filter(|(&y, _)| y == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Brute-force AUC over every positive/negative pair (0.5 per tie). The
/// independent oracle for [`auc_rank`].
pub fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let positives: Vec<f64> = scores
        .iter()
        .zip(labels.iter())
        .filter(|(_, &y)| y == 1)
        .map(|(&s, _)| s)
        .collect();
    let negatives: Vec<f64> = scores
        .iter()
        .zip(labels.iter())
        .filter(|(_, &y)| y == 0)
        .map(|(&s, _)| s)
        .collect();
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &p in &positives {
        for &n in &negatives {
            if p > n {
                total += 1.0;
            } else if p == n {
                total += 0.5;
            }
        }
    }
    Some(total / (positives.len() * negatives.len()) as f64)
}

/// Assemble a report from scores, hard predictions, and labels.
pub fn report_from_scores(scores: &[f64], predictions: &[u8], labels: &[u8]) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty test set"));
    }
    if scores.len() != labels.len() || predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores / {} predictions / {} labels",
            scores.len(),
            predictions.len(),
            labels.len()
        )));
    }
    let confusion = confusion_counts(predictions, labels);
    let auc = auc_rank(scores, labels);
    if auc.is_none() {
        eprintln!("warning: single-class test set, AUC undefined");
    }
    Ok(MetricsReport {
        acc: accuracy(&confusion),
        auc,
        f1: f1_score(&confusion),
        confusion,
        curve: Vec::new(),
    })
}
