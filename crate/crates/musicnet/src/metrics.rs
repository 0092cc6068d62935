//! Classifier quality measures: AUROC (rank form), AUPRC (step
//! integration), accuracy, and macro precision/recall/F1.

use serde::Serialize;

/// Metrics for a two-class evaluation. `auroc`/`auprc` are `None` when the
/// label set is degenerate (no positives or no negatives to rank).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ClassificationMetrics {
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
}

/// Area under the ROC curve via the Mann-Whitney rank statistic with
/// midranks for tied scores. `None` if either class is absent.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auroc: score/label length mismatch");
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("auroc: non-finite score"));
    // Average ranks over tie groups (1-based ranks).
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..scores.len()).filter(|&i| labels[i] == 1).map(|i| ranks[i]).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall curve by step integration over distinct
/// score thresholds (descending): sum of (R_k − R_{k−1})·P_k. `None` if
/// there are no positives.
pub fn auprc(scores: &[f64], labels: &[usize]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auprc: score/label length mismatch");
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("auprc: non-finite score"));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        // A tie group moves the operating point in one step.
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_pos as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Some(area)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "accuracy: length mismatch");
    assert!(!labels.is_empty(), "accuracy: empty evaluation set");
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Per-class precision/recall/F1 averaged uniformly over all `num_classes`
/// classes; a class with an empty denominator contributes 0.
pub fn macro_prf(predictions: &[usize], labels: &[usize], num_classes: usize) -> (f64, f64, f64) {
    assert_eq!(predictions.len(), labels.len(), "macro_prf: length mismatch");
    assert!(num_classes >= 1, "macro_prf: need at least one class");
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut f1_sum = 0.0;
    for c in 0..num_classes {
        let tp = predictions.iter().zip(labels).filter(|(&p, &y)| p == c && y == c).count();
        let pred_c = predictions.iter().filter(|&&p| p == c).count();
        let actual_c = labels.iter().filter(|&&y| y == c).count();
        let precision = if pred_c > 0 { tp as f64 / pred_c as f64 } else { 0.0 };
        let recall = if actual_c > 0 { tp as f64 / actual_c as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        precision_sum += precision;
        recall_sum += recall;
        f1_sum += f1;
    }
    let k = num_classes as f64;
    (precision_sum / k, recall_sum / k, f1_sum / k)
}

/// Bundle the full metric set for a two-class problem: `scores` are the
/// positive-class probabilities, `predictions` the argmax labels.
pub fn classification_metrics(
    scores: &[f64],
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> ClassificationMetrics {
    let (precision_macro, recall_macro, f1_macro) = macro_prf(predictions, labels, num_classes);
    ClassificationMetrics {
        auroc: auroc(scores, labels),
        auprc: auprc(scores, labels),
        accuracy: accuracy(predictions, labels),
        precision_macro,
        recall_macro,
        f1_macro,
    }
}

pub mod oracles {
    //! Independent loop-based re-computations used by the unit tests and the
    //! acceptance suite.

    /// All-pairs counting form of the AUROC: concordant pairs count 1, tied
    /// scores count 1/2.
    pub fn auroc_pairs(scores: &[f64], labels: &[usize]) -> Option<f64> {
        let pos: Vec<f64> =
            scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&s, _)| s).collect();
        let neg: Vec<f64> =
            scores.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(&s, _)| s).collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    total += 1.0;
                } else if p == n {
                    total += 0.5;
                }
            }
        }
        Some(total / (pos.len() as f64 * neg.len() as f64))
    }

    /// Step-sum AUPRC recomputed from scratch at every distinct threshold.
    pub fn auprc_steps(scores: &[f64], labels: &[usize]) -> Option<f64> {
        let n_pos = labels.iter().filter(|&&y| y == 1).count();
        if n_pos == 0 {
            return None;
        }
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut prev_recall = 0.0;
        let mut area = 0.0;
        for &t in &thresholds {
            let tp = scores.iter().zip(labels).filter(|(&s, &y)| s >= t && y == 1).count();
            let fp = scores.iter().zip(labels).filter(|(&s, &y)| s >= t && y == 0).count();
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / n_pos as f64;
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        Some(area)
    }

    /// Confusion-matrix macro precision/recall/F1.
    pub fn macro_prf_confusion(
        predictions: &[usize],
        labels: &[usize],
        num_classes: usize,
    ) -> (f64, f64, f64) {
        let mut confusion = vec![0usize; num_classes * num_classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            confusion[y * num_classes + p] += 1;
        }
        let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
        for c in 0..num_classes {
            let tp = confusion[c * num_classes + c];
            let col: usize = (0..num_classes).map(|y| confusion[y * num_classes + c]).sum();
            let row: usize = confusion[c * num_classes..(c + 1) * num_classes].iter().sum();
            let p = if col > 0 { tp as f64 / col as f64 } else { 0.0 };
            let r = if row > 0 { tp as f64 / row as f64 } else { 0.0 };
            ps += p;
            rs += r;
            fs += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        }
        let k = num_classes as f64;
        (ps / k, rs / k, fs / k)
    }
}
