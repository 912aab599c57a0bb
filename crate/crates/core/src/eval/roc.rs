use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid_input, DistlError, Result};

const Z975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocAnalysis {
    /// Descending; the first is `+∞` (nothing called positive).
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
    pub ci95: (f64, f64),
    pub n_pos: usize,
    pub n_neg: usize,
}

fn split_classes(scores: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(invalid_input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid_input("scores must be finite"));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(DistlError::UndefinedMetric(
            "AUC needs both positive and negative samples".into(),
        ));
    }
    Ok((pos, neg))
}

/// Placement values: for each positive, the fraction of negatives it beats
/// (ties ½); for each negative, the fraction of positives that beat it.
fn placements(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut sp = pos.to_vec();
    let mut sn = neg.to_vec();
    sp.sort_by(f64::total_cmp);
    sn.sort_by(f64::total_cmp);
    let below = |sorted: &[f64], x: f64| sorted.partition_point(|&v| v < x);
    let upto = |sorted: &[f64], x: f64| sorted.partition_point(|&v| v <= x);
    let v10 = pos
        .iter()
        .map(|&x| (below(&sn, x) as f64 + 0.5 * (upto(&sn, x) - below(&sn, x)) as f64) / sn.len() as f64)
        .collect();
    let v01 = neg
        .iter()
        .map(|&y| {
            let greater = sp.len() - upto(&sp, y);
            (greater as f64 + 0.5 * (upto(&sp, y) - below(&sp, y)) as f64) / sp.len() as f64
        })
        .collect();
    (v10, v01)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 {
        return 0.0;
    }
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

fn delong_var(v10: &[f64], v01: &[f64]) -> f64 {
    cov(v10, v10) / v10.len() as f64 + cov(v01, v01) / v01.len() as f64
}

fn clip_ci(auc: f64, var: f64) -> (f64, f64) {
    let half = Z975 * var.max(0.0).sqrt();
    ((auc - half).max(0.0), (auc + half).min(1.0))
}

/// ROC curve, tie-corrected Mann-Whitney AUC and DeLong 95% interval.
/// `labels[i]` is true for positives.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocAnalysis> {
    let (pos, neg) = split_classes(scores, labels)?;
    let (v10, v01) = placements(&pos, &neg);
    let auc = mean(&v10);

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut thresholds = vec![f64::INFINITY];
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        tpr.push(tp as f64 / np);
        fpr.push(fp as f64 / nn);
    }
    Ok(RocAnalysis {
        thresholds,
        tpr,
        fpr,
        auc,
        ci95: clip_ci(auc, delong_var(&v10, &v01)),
        n_pos: pos.len(),
        n_neg: neg.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub ci95_a: (f64, f64),
    pub ci95_b: (f64, f64),
    pub diff: f64,
    pub z: f64,
    pub p_value: f64,
    /// `p < 0.05`.
    pub significant: bool,
    /// Zero variance of the difference; `p` is then 1.
    pub degenerate: bool,
}

/// Paired DeLong test of two scorers on the same samples.
pub fn delong_compare(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DelongResult> {
    if scores_a.len() != scores_b.len() {
        return Err(invalid_input("paired scores must have equal length"));
    }
    let (pa, na) = split_classes(scores_a, labels)?;
    let (pb, nb) = split_classes(scores_b, labels)?;
    let (a10, a01) = placements(&pa, &na);
    let (b10, b01) = placements(&pb, &nb);
    let (auc_a, auc_b) = (mean(&a10), mean(&b10));
    let (m, n) = (a10.len() as f64, a01.len() as f64);
    let var_a = cov(&a10, &a10) / m + cov(&a01, &a01) / n;
    let var_b = cov(&b10, &b10) / m + cov(&b01, &b01) / n;
    let cov_ab = cov(&a10, &b10) / m + cov(&a01, &b01) / n;
    let var_diff = var_a + var_b - 2.0 * cov_ab;
    let diff = auc_a - auc_b;
    let degenerate = !(var_diff > 1e-14);
    let (z, p_value) = if degenerate {
        (0.0, 1.0)
    } else {
        let z = diff / var_diff.sqrt();
        let normal = Normal::standard();
        (z, (2.0 * normal.sf(z.abs())).min(1.0))
    };
    Ok(DelongResult {
        auc_a,
        auc_b,
        ci95_a: clip_ci(auc_a, var_a),
        ci95_b: clip_ci(auc_b, var_b),
        diff,
        z,
        p_value,
        significant: p_value < 0.05,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingMetrics {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    /// Undefined when nothing is called positive.
    pub ppv: Option<f64>,
    /// Undefined when nothing is called negative.
    pub npv: Option<f64>,
    pub unmet_constraint: bool,
}

/// Confusion-derived metrics when `score ≥ threshold` is called positive.
pub fn metrics_at(scores: &[f64], labels: &[bool], threshold: f64) -> OperatingMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    OperatingMetrics {
        threshold,
        sensitivity: ratio(tp, fn_).unwrap_or(0.0),
        specificity: ratio(tn, fp).unwrap_or(0.0),
        accuracy: (tp + tn) as f64 / scores.len().max(1) as f64,
        ppv: ratio(tp, fp),
        npv: ratio(tn, fn_),
        unmet_constraint: false,
    }
}

/// Threshold with sensitivity ≥ `min_sensitivity` and maximal specificity
/// (ties: higher sensitivity, then higher threshold). When no threshold
/// qualifies, the most sensitive one is returned with `unmet_constraint`.
pub fn operating_point(
    roc: &RocAnalysis,
    scores: &[f64],
    labels: &[bool],
    min_sensitivity: f64,
) -> Result<OperatingMetrics> {
    if scores.len() != labels.len() || scores.len() != roc.n_pos + roc.n_neg {
        return Err(invalid_input("operating point needs the samples the ROC was built from"));
    }
    let candidates: Vec<OperatingMetrics> = roc
        .thresholds
        .iter()
        .map(|&t| metrics_at(scores, labels, t))
        .collect();
    let better = |a: &OperatingMetrics, b: &OperatingMetrics| {
        (a.specificity, a.sensitivity, a.threshold) > (b.specificity, b.sensitivity, b.threshold)
    };
    let mut best: Option<&OperatingMetrics> = None;
    for c in candidates.iter().filter(|c| c.sensitivity >= min_sensitivity) {
        if best.is_none_or(|b| better(c, b)) {
            best = Some(c);
        }
    }
    if let Some(b) = best {
        return Ok(b.clone());
    }
    let mut fallback = candidates
        .iter()
        .max_by(|a, b| {
            a.sensitivity
                .total_cmp(&b.sensitivity)
                .then(a.specificity.total_cmp(&b.specificity))
        })
        .cloned()
        .expect("roc always has thresholds");
    fallback.unmet_constraint = true;
    Ok(fallback)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / pairs
    }

    #[test]
    fn separated_and_tied() {
        let labels = [false, false, true, true];
        let r = roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap();
        assert_eq!(r.auc, 1.0);
        let r = roc_auc(&[0.5; 4], &labels).unwrap();
        assert_eq!(r.auc, 0.5);
        assert!(r.ci95.0 <= 0.5 && r.ci95.1 >= 0.5);
    }

    #[test]
    fn twenty_samples_match_pair_count() {
        let scores: Vec<f64> = (0..20).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect();
        let labels: Vec<bool> = (0..20).map(|i| (i * 31) % 3 == 0).collect();
        let r = roc_auc(&scores, &labels).unwrap();
        assert_eq!(r.auc, brute_auc(&scores, &labels));
        assert!(r.tpr.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.fpr.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!((*r.tpr.last().unwrap(), *r.fpr.last().unwrap()), (1.0, 1.0));
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(DistlError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn identical_scorers_are_degenerate() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.2, 0.9];
        let l = [false, false, true, true, false, true];
        let d = delong_compare(&s, &s, &l).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.p_value, 1.0);
        assert_eq!(d.diff, 0.0);
        assert!(!d.significant);
    }

    #[test]
    fn strong_versus_shuffled_is_significant() {
        let labels: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
        let strong: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 } + (i as f64) * 1e-4).collect();
        let random: Vec<f64> = (0..200).map(|i| ((i * 7919 + 13) % 211) as f64).collect();
        let d = delong_compare(&strong, &random, &labels).unwrap();
        assert!(d.significant, "{d:?}");
        let swapped = delong_compare(&random, &strong, &labels).unwrap();
        assert_eq!(swapped.diff, -d.diff);
        assert!((swapped.p_value - d.p_value).abs() < 1e-12);
    }

    #[test]
    fn perfect_operating_point() {
        let scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
        let labels = [false, false, false, true, true, true];
        let roc = roc_auc(&scores, &labels).unwrap();
        let op = operating_point(&roc, &scores, &labels, 0.8).unwrap();
        assert_eq!((op.sensitivity, op.specificity, op.accuracy), (1.0, 1.0, 1.0));
        assert_eq!(op.threshold, 0.7);
        assert_eq!(op.ppv, Some(1.0));
        assert_eq!(op.npv, Some(1.0));
    }

    #[test]
    fn impossible_constraint_is_flagged() {
        let scores = [0.1, 0.9];
        let labels = [false, true];
        let roc = roc_auc(&scores, &labels).unwrap();
        let op = operating_point(&roc, &scores, &labels, 1.1).unwrap();
        assert!(op.unmet_constraint);
        assert_eq!(op.sensitivity, 1.0);
    }
}
