//! `eval`: per-generation metrics, generation comparison, screening and the
//! attention panel.

use std::collections::BTreeMap;
use std::path::Path;

use distl_core::distill::{positive_scores, Checkpoint};
use distl_core::eval::{delong_compare, pooled_and_per_site, screening_sim, DelongResult, MetricsReport, ScreeningResult};
use distl_core::model::{extract_attention, ModelParams};
use distl_core::protocol::Split;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{load_manifest, EvalSplit};
use crate::error::{CliError, CliResult};
use crate::ledger::RunLedger;
use crate::paths::{read_json, write_json, RunPaths};
use crate::plot;

/// Scores `params` on each split and writes one metrics document per split.
/// Returns the written paths (relative to the run directory) and the scores.
pub fn evaluate_generation(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    params: &ModelParams,
    generation: usize,
    splits: &[&EvalSplit],
) -> CliResult<Vec<String>> {
    Ok(score_and_report(cfg, paths, params, generation, splits)?.0)
}

fn score_and_report(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    params: &ModelParams,
    generation: usize,
    splits: &[&EvalSplit],
) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let mut written = Vec::new();
    let mut all_scores = Vec::new();
    for split in splits {
        if split.records.is_empty() {
            all_scores.push(Vec::new());
            continue;
        }
        let scores = positive_scores(params, &split.refs(), cfg.distill.execution)?;
        let report = pooled_and_per_site(
            &cfg.task,
            generation,
            split.name,
            &scores,
            &split.labels,
            &split.sites,
            cfg.eval.min_sensitivity,
        )?;
        let rel = RunPaths::metrics_rel(generation, split.name);
        write_json(&paths.root.join(&rel), &report)?;
        written.push(rel);
        all_scores.push(scores);
    }
    Ok((written, all_scores))
}

/// Paired comparison of the first and last evaluated generation on a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationComparison {
    pub split: String,
    pub generation_a: usize,
    pub generation_b: usize,
    pub delong: Option<DelongResult>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub generation: usize,
    pub split: String,
    pub prevalence: f64,
    pub threshold: f64,
    pub result: ScreeningResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelImage {
    pub id: String,
    pub label: Option<usize>,
    /// Preprocessed image, row-major.
    pub pixels: Vec<Vec<f64>>,
    /// Per-head normalized attention upsampled to the image side.
    pub heads: Vec<Vec<Vec<f64>>>,
}

/// Source data of the attention-overlay figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPanel {
    pub generation: usize,
    pub threshold: f64,
    pub images: Vec<PanelImage>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOutcome {
    pub evaluated: Vec<usize>,
    /// Generations listed in the ledger whose checkpoint is missing.
    pub missing: Vec<usize>,
}

fn rows(a: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// Evaluates every completed generation of one seed's run and renders plots.
pub fn cmd_eval(cfg: &ExperimentConfig, out_root: &Path, seed: u64) -> CliResult<EvalOutcome> {
    let paths = RunPaths::new(out_root, seed);
    let ledger = RunLedger::open(&paths.root)?;
    let generations: Vec<usize> = ledger.completed().iter().map(|r| r.generation).collect();
    if generations.is_empty() {
        return Err(CliError::usage(format!(
            "no completed generations under {}; run `distl run` first",
            paths.root.display()
        )));
    }
    let manifest = load_manifest(&cfg.data.manifest)?;
    let val = EvalSplit::load(cfg, &manifest, Split::InternalVal)?;
    let ext = EvalSplit::load(cfg, &manifest, Split::ExternalTest)?;
    let splits = [&val, &ext];

    let mut outcome = EvalOutcome::default();
    let mut scores_by_gen: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let mut last: Option<(usize, Checkpoint)> = None;
    for &t in &generations {
        let path = paths.checkpoint(t);
        if !path.exists() {
            warn!("checkpoint {} missing, skipping generation {t}", path.display());
            outcome.missing.push(t);
            continue;
        }
        let ckpt = Checkpoint::load(&path)?;
        let (_, scores) = score_and_report(cfg, &paths, &ckpt.teacher, t, &splits)?;
        scores_by_gen.insert(t, scores);
        outcome.evaluated.push(t);
        last = Some((t, ckpt));
    }

    let plots = paths.plots_dir();
    std::fs::create_dir_all(&plots)?;
    let mut comparisons = Vec::new();
    if let (Some((&ga, sa)), Some((&gb, sb))) = (scores_by_gen.iter().next(), scores_by_gen.iter().next_back()) {
        for (i, split) in splits.iter().enumerate() {
            if split.records.is_empty() {
                continue;
            }
            let (delong, note) = match delong_compare(&sa[i], &sb[i], &split.labels) {
                Ok(d) => (Some(d), None),
                Err(e) => (None, Some(e.to_string())),
            };
            comparisons.push(GenerationComparison {
                split: split.name.to_string(),
                generation_a: ga,
                generation_b: gb,
                delong,
                note,
            });
        }
    }
    write_json(&plots.join("delong.json"), &comparisons)?;

    if let Some((t, ckpt)) = &last {
        let report: Option<MetricsReport> = read_json(&paths.root.join(RunPaths::metrics_rel(*t, ext.name))).ok();
        let threshold = report.and_then(|r| r.pooled.operating.map(|o| o.threshold));
        if let (Some(threshold), Some(scores)) = (threshold, scores_by_gen.get(t)) {
            match screening_sim(
                &scores[1],
                &ext.labels,
                cfg.eval.screening_prevalence,
                threshold,
                cfg.eval.screening_samples,
                seed,
            ) {
                Ok(result) => write_json(
                    &paths.metrics_dir().join("screening.json"),
                    &ScreeningReport {
                        generation: *t,
                        split: ext.name.to_string(),
                        prevalence: cfg.eval.screening_prevalence,
                        threshold,
                        result,
                    },
                )?,
                Err(e) => warn!("screening simulation skipped: {e}"),
            }
        }
        let mut images = Vec::new();
        for (i, r) in ext.records.iter().enumerate() {
            if images.len() >= cfg.eval.panel_images {
                break;
            }
            if !ext.labels[i] {
                continue;
            }
            let img = &ext.images[i];
            let att = extract_attention(&ckpt.teacher, img)?;
            let side = img.height();
            images.push(PanelImage {
                id: r.id.clone(),
                label: r.label,
                pixels: rows(img.pixels()),
                heads: (0..att.heads()).map(|h| rows(&att.upsample(h, side))).collect(),
            });
        }
        write_json(
            &plots.join("attention_panel.json"),
            &AttentionPanel {
                generation: *t,
                threshold: cfg.eval.attention_threshold,
                images,
            },
        )?;
    }
    plot::render_run(&paths)?;
    Ok(outcome)
}

/// AUC per seed and generation with the median across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSummary {
    pub split: String,
    pub generation: usize,
    pub seeds: Vec<u64>,
    pub aucs: Vec<Option<f64>>,
    pub median_auc: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Reads every seed's metrics files and writes `summary.json` under the
/// output root.
pub fn summarize(out_root: &Path, seeds: &[u64]) -> CliResult<Vec<TrendSummary>> {
    let mut table: BTreeMap<(String, usize), Vec<(u64, Option<f64>)>> = BTreeMap::new();
    for &seed in seeds {
        let paths = RunPaths::new(out_root, seed);
        for report in plot::read_reports(&paths)? {
            table
                .entry((report.split.clone(), report.generation))
                .or_default()
                .push((seed, report.pooled.auc));
        }
    }
    let summary: Vec<TrendSummary> = table
        .into_iter()
        .map(|((split, generation), entries)| {
            let defined: Vec<f64> = entries.iter().filter_map(|e| e.1).collect();
            TrendSummary {
                split,
                generation,
                seeds: entries.iter().map(|e| e.0).collect(),
                aucs: entries.iter().map(|e| e.1).collect(),
                median_auc: median(&defined),
            }
        })
        .collect();
    write_json(&out_root.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
