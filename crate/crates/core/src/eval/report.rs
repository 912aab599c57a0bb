use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::roc::{operating_point, roc_auc, OperatingMetrics};
use crate::error::{invalid_config, invalid_input, DistlError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningResult {
    pub ruled_out_fraction: f64,
    /// Undefined when nothing is predicted negative.
    pub npv: Option<f64>,
    pub n: usize,
    pub n_pos: usize,
    /// Indices into the input drawn for the resampled set.
    pub sample: Vec<usize>,
}

/// Resamples (with replacement, seeded) `n` cases at the target prevalence,
/// then reports the share called negative (`score < threshold`) and its NPV.
pub fn screening_sim(
    scores: &[f64],
    labels: &[bool],
    target_prevalence: f64,
    threshold: f64,
    n: usize,
    seed: u64,
) -> Result<ScreeningResult> {
    if !(target_prevalence > 0.0 && target_prevalence < 1.0) {
        return Err(invalid_config(format!(
            "prevalence must lie in (0, 1), got {target_prevalence}"
        )));
    }
    if scores.len() != labels.len() || n == 0 {
        return Err(invalid_input("screening needs paired scores/labels and n > 0"));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(DistlError::UndefinedMetric(
            "screening needs both classes present".into(),
        ));
    }
    let n_pos = (target_prevalence * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = Vec::with_capacity(n);
    for k in 0..n {
        let pool = if k < n_pos { &pos } else { &neg };
        sample.push(pool[rng.random_range(0..pool.len())]);
    }
    let called_neg: Vec<usize> = sample.iter().copied().filter(|&i| scores[i] < threshold).collect();
    let true_neg = called_neg.iter().filter(|&&i| !labels[i]).count();
    Ok(ScreeningResult {
        ruled_out_fraction: called_neg.len() as f64 / n as f64,
        npv: (!called_neg.is_empty()).then(|| true_neg as f64 / called_neg.len() as f64),
        n,
        n_pos,
        sample,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMetrics {
    pub n: usize,
    pub n_pos: usize,
    pub auc: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    pub operating: Option<OperatingMetrics>,
    /// Set when only one class is present.
    pub undefined: bool,
}

fn site_metrics(scores: &[f64], labels: &[bool], min_sensitivity: f64) -> Result<SiteMetrics> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    match roc_auc(scores, labels) {
        Ok(roc) => Ok(SiteMetrics {
            n: scores.len(),
            n_pos,
            auc: Some(roc.auc),
            ci95: Some(roc.ci95),
            operating: Some(operating_point(&roc, scores, labels, min_sensitivity)?),
            undefined: false,
        }),
        Err(DistlError::UndefinedMetric(_)) => Ok(SiteMetrics {
            n: scores.len(),
            n_pos,
            auc: None,
            ci95: None,
            operating: None,
            undefined: true,
        }),
        Err(e) => Err(e),
    }
}

/// One evaluation: pooled metrics plus one block per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub generation: usize,
    pub split: String,
    pub pooled: SiteMetrics,
    pub per_site: BTreeMap<String, SiteMetrics>,
    pub flags: Vec<String>,
}

pub fn pooled_and_per_site(
    task: &str,
    generation: usize,
    split: &str,
    scores: &[f64],
    labels: &[bool],
    sites: &[String],
    min_sensitivity: f64,
) -> Result<MetricsReport> {
    if scores.len() != labels.len() || scores.len() != sites.len() {
        return Err(invalid_input("scores, labels and sites must align"));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for ((&s, &l), site) in scores.iter().zip(labels).zip(sites) {
        let g = groups.entry(site.as_str()).or_default();
        g.0.push(s);
        g.1.push(l);
    }
    let mut flags = Vec::new();
    let pooled = site_metrics(scores, labels, min_sensitivity)?;
    if pooled.undefined {
        flags.push("pooled_auc_undefined".to_string());
    }
    let mut per_site = BTreeMap::new();
    for (site, (s, l)) in groups {
        let m = site_metrics(&s, &l, min_sensitivity)?;
        if m.undefined {
            flags.push(format!("site_auc_undefined:{site}"));
        }
        per_site.insert(site.to_string(), m);
    }
    Ok(MetricsReport {
        task: task.to_string(),
        generation,
        split: split.to_string(),
        pooled,
        per_site,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Vec<f64>, Vec<bool>) {
        let labels: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
        let scores = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
        (scores, labels)
    }

    #[test]
    fn perfect_screening() {
        let (s, l) = toy();
        let r = screening_sim(&s, &l, 0.1, 0.5, 10_000, 3).unwrap();
        assert_eq!(r.ruled_out_fraction, 0.9);
        assert_eq!(r.npv, Some(1.0));
    }

    #[test]
    fn constant_negative_screening() {
        let (_, l) = toy();
        let s = vec![0.0; l.len()];
        let r = screening_sim(&s, &l, 0.1, 0.5, 10_000, 3).unwrap();
        assert_eq!(r.ruled_out_fraction, 1.0);
        assert!((r.npv.unwrap() - 0.9).abs() < 1e-12);
        assert!(screening_sim(&s, &l, 1.0, 0.5, 100, 3).is_err());
    }

    #[test]
    fn single_site_collapses() {
        let (s, l) = toy();
        let sites = vec!["a".to_string(); s.len()];
        let r = pooled_and_per_site("t", 0, "external_test", &s, &l, &sites, 0.8).unwrap();
        assert_eq!(r.per_site["a"], r.pooled);
        assert!(r.pooled.operating.is_some());
    }

    #[test]
    fn one_class_site_is_marked() {
        let (s, l) = toy();
        let sites: Vec<String> = l.iter().map(|&x| if x { "pos" } else { "neg" }.to_string()).collect();
        let r = pooled_and_per_site("t", 1, "x", &s, &l, &sites, 0.8).unwrap();
        assert_eq!(r.pooled.auc, Some(1.0));
        assert!(r.per_site["pos"].undefined);
        assert_eq!(r.flags.len(), 2);
    }
}
