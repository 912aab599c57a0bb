//! `localize`: best-head attention dice against reference lesion masks.

use std::path::{Path, PathBuf};

use distl_core::distill::Checkpoint;
use distl_core::eval::{dice, localize, BinaryMask};
use distl_core::model::{extract_attention, gradcam, CnnAdapter, CnnSpec};
use distl_core::protocol::{SampleRecord, Split};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{load_images, load_manifest, mask_path, read_mask, rng_for, Stream};
use crate::error::{CliError, CliResult};
use crate::ledger::RunLedger;
use crate::paths::{write_json, RunPaths};
use crate::train::read_partition;

#[derive(Debug, Clone)]
pub struct LocalizeOptions {
    pub split: Split,
    pub limit: usize,
    /// Defaults to the last completed generation of the run.
    pub checkpoint: Option<PathBuf>,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        LocalizeOptions {
            split: Split::InternalVal,
            limit: 20,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDice {
    pub id: String,
    pub best_head: Option<usize>,
    pub best_dice: f64,
    pub head_dice: Vec<f64>,
    /// Best over heads of area-matched random masks.
    pub random_dice: f64,
    pub gradcam_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    pub n: usize,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub median_dice: f64,
}

/// Mean, population standard deviation and median.
pub fn summarize_dice(values: &[f64]) -> DiceSummary {
    let n = values.len();
    if n == 0 {
        return DiceSummary {
            n,
            mean_dice: f64::NAN,
            std_dice: f64::NAN,
            median_dice: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    DiceSummary {
        n,
        mean_dice: mean,
        std_dice: var.sqrt(),
        median_dice: crate::evaluate::median(values).unwrap_or(f64::NAN),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcamColumn {
    pub threshold: f64,
    pub trained_steps: u64,
    pub summary: DiceSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub n: usize,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub median_dice: f64,
    pub threshold: f64,
    pub checkpoint: String,
    pub per_image: Vec<ImageDice>,
    pub random_baseline: DiceSummary,
    pub gradcam: Option<GradcamColumn>,
}

/// Uniform random mask with exactly `area` pixels set.
pub fn random_mask<R: Rng + ?Sized>(height: usize, width: usize, area: usize, rng: &mut R) -> BinaryMask {
    let mut cells: Vec<usize> = (0..height * width).collect();
    cells.shuffle(rng);
    let mut m = BinaryMask::empty(height, width);
    for &i in cells.iter().take(area) {
        m.0[[i / width, i % width]] = true;
    }
    m
}

fn default_checkpoint(paths: &RunPaths) -> CliResult<PathBuf> {
    let ledger = RunLedger::open(&paths.root)?;
    let last = ledger
        .completed()
        .last()
        .map(|r| r.generation)
        .ok_or_else(|| CliError::usage(format!("no completed generations under {}", paths.root.display())))?;
    Ok(paths.checkpoint(last))
}

fn mask_records(cfg: &ExperimentConfig, dir: &Path, opts: &LocalizeOptions) -> CliResult<Vec<(SampleRecord, BinaryMask)>> {
    let manifest = load_manifest(&cfg.data.manifest)?;
    let mut out = Vec::new();
    for r in manifest.into_iter().filter(|r| r.split == opts.split) {
        if out.len() >= opts.limit {
            break;
        }
        let path = mask_path(dir, &r.id);
        if !path.exists() {
            continue;
        }
        let mask = read_mask(&path, cfg.preprocess.side)?;
        if mask.count() > 0 {
            out.push((r, mask));
        }
    }
    Ok(out)
}

fn train_adapter(cfg: &ExperimentConfig, paths: &RunPaths, seed: u64) -> CliResult<CnnAdapter> {
    let partition = read_partition(paths)?;
    let store = load_images(cfg, &partition.labeled, &cfg.image_root())?;
    let images = partition
        .labeled
        .iter()
        .map(|r| store.get(&r.id))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = partition.labeled.iter().map(|r| r.label.unwrap_or(0)).collect();
    let mut rng = rng_for(seed, Stream::Adapter);
    let spec = CnnSpec {
        input_side: cfg.preprocess.side,
        num_classes: cfg.model.num_classes,
        ..CnnSpec::default()
    };
    let mut cnn = CnnAdapter::new(spec, &mut rng)?;
    cnn.train(
        &images,
        &labels,
        cfg.eval.cnn_epochs,
        cfg.initial.batch_size,
        1e-3,
        &cfg.initial.augment,
        &mut rng,
        cfg.distill.execution,
    )?;
    Ok(cnn)
}

/// Scores the chosen checkpoint's attention heads against reference masks and
/// writes `localization.json` into the run directory.
pub fn cmd_localize(cfg: &ExperimentConfig, out_root: &Path, seed: u64, opts: &LocalizeOptions) -> CliResult<DiceReport> {
    let dir = cfg
        .data
        .masks_dir
        .as_deref()
        .ok_or_else(|| CliError::usage("localization needs data.masks_dir"))?;
    let selected = mask_records(cfg, dir, opts)?;
    if selected.is_empty() {
        return Err(CliError::usage(format!("no nonempty masks found in {}", dir.display())));
    }
    let paths = RunPaths::new(out_root, seed);
    let ckpt_path = match &opts.checkpoint {
        Some(p) => p.clone(),
        None => default_checkpoint(&paths)?,
    };
    if !ckpt_path.exists() {
        return Err(CliError::usage(format!("checkpoint {} not found", ckpt_path.display())));
    }
    let model = Checkpoint::load(&ckpt_path)?.teacher;
    let records: Vec<SampleRecord> = selected.iter().map(|(r, _)| r.clone()).collect();
    let store = load_images(cfg, &records, &cfg.image_root())?;
    let adapter = if cfg.eval.gradcam {
        Some(train_adapter(cfg, &paths, seed)?)
    } else {
        None
    };
    let side = cfg.preprocess.side;
    let mut rng = rng_for(seed, Stream::Baseline);
    let mut per_image = Vec::with_capacity(selected.len());
    for (record, reference) in &selected {
        let img = store.get(&record.id)?;
        let att = extract_attention(&model, img)?;
        let maps: Vec<Array2<f64>> = (0..att.heads())
            .map(|h| att.maps.slice(s![h, .., ..]).to_owned())
            .collect();
        let loc = localize(&maps, cfg.eval.attention_threshold, side, side, Some(reference))?;
        let mut random_dice = 0.0f64;
        for m in &loc.masks {
            let r = random_mask(side, side, m.count(), &mut rng);
            random_dice = random_dice.max(dice(&r, reference)?);
        }
        let gradcam_dice = match &adapter {
            Some(cnn) => {
                let cam = gradcam(cnn, img, record.label.unwrap_or(1).min(cnn.spec.num_classes - 1))?;
                let l = localize(&[cam.heatmap], cfg.eval.gradcam_threshold, side, side, Some(reference))?;
                l.best_dice
            }
            None => None,
        };
        per_image.push(ImageDice {
            id: record.id.clone(),
            best_head: loc.best_head,
            best_dice: loc.best_dice.unwrap_or(0.0),
            head_dice: loc.dice,
            random_dice,
            gradcam_dice,
        });
    }
    let report = build_report(
        per_image,
        cfg.eval.attention_threshold,
        ckpt_path.display().to_string(),
        adapter.map(|a| (cfg.eval.gradcam_threshold, a.trained_steps)),
    );
    write_json(&paths.root.join("localization.json"), &report)?;
    Ok(report)
}

/// Aggregates per-image rows into the report schema.
pub fn build_report(
    per_image: Vec<ImageDice>,
    threshold: f64,
    checkpoint: String,
    gradcam: Option<(f64, u64)>,
) -> DiceReport {
    let best: Vec<f64> = per_image.iter().map(|d| d.best_dice).collect();
    let random: Vec<f64> = per_image.iter().map(|d| d.random_dice).collect();
    let summary = summarize_dice(&best);
    let gradcam = gradcam.map(|(threshold, trained_steps)| {
        let values: Vec<f64> = per_image.iter().filter_map(|d| d.gradcam_dice).collect();
        GradcamColumn {
            threshold,
            trained_steps,
            summary: summarize_dice(&values),
        }
    });
    DiceReport {
        n: summary.n,
        mean_dice: summary.mean_dice,
        std_dice: summary.std_dice,
        median_dice: summary.median_dice,
        threshold,
        checkpoint,
        per_image,
        random_baseline: summarize_dice(&random),
        gradcam,
    }
}
