//! `synth`: writes a synthetic dataset directory ready for `run`.

use std::path::{Path, PathBuf};

use distl_core::par::Execution;
use distl_core::protocol::{synth_dataset, synth_multilabel, write_gray16, write_manifest, SampleRecord, SynthSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{mask_path, write_mask, write_pretrain_manifest, PretrainRecord};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    /// Classes of the task (class 0 is lesion-free).
    pub classes: usize,
    /// Further lesion classes written to the out-of-task manifest.
    pub extra_classes: usize,
    pub extra_per_class: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub external_per_class: usize,
    pub side: usize,
    pub difficulty: f64,
    pub lesion_amplitude: f64,
    /// Multi-label pretraining images; 0 skips the pretraining manifest.
    pub pretrain_samples: usize,
    pub pretrain_findings: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        let spec = SynthSpec::default();
        SynthOptions {
            classes: 2,
            extra_classes: 2,
            extra_per_class: 150,
            train_per_class: spec.train_per_class,
            val_per_class: spec.val_per_class,
            external_per_class: spec.external_per_class,
            side: spec.side,
            difficulty: spec.difficulty,
            lesion_amplitude: spec.lesion_amplitude,
            pretrain_samples: 0,
            pretrain_findings: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub masks_dir: PathBuf,
    pub extra_manifest: Option<PathBuf>,
    pub pretrain_manifest: Option<PathBuf>,
    pub records: usize,
}

/// Renders images, lesion masks and manifests into `dir`.
pub fn cmd_synth(opts: &SynthOptions, dir: &Path, exec: Execution) -> CliResult<SynthOutput> {
    if opts.classes < 2 {
        return Err(CliError::usage("synth needs at least two task classes"));
    }
    let spec = SynthSpec {
        num_classes: opts.classes + opts.extra_classes,
        train_per_class: opts.train_per_class.max(opts.extra_per_class),
        val_per_class: opts.val_per_class,
        external_per_class: opts.external_per_class,
        side: opts.side,
        difficulty: opts.difficulty,
        lesion_amplitude: opts.lesion_amplitude,
        ..SynthSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let data = synth_dataset(&spec, &mut rng, exec)?;

    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&masks_dir)?;

    let index = |id: &str| -> usize {
        id.rsplit('_')
            .next()
            .and_then(|n| n.parse().ok())
            .unwrap_or(0)
    };
    let mut task = Vec::new();
    let mut extra = Vec::new();
    for r in &data.records {
        let label = r.label.expect("synthetic records are labeled");
        let keep_task = label < opts.classes && (r.split != distl_core::protocol::Split::Train || index(&r.id) < opts.train_per_class);
        let keep_extra = label >= opts.classes
            && r.split == distl_core::protocol::Split::Train
            && index(&r.id) < opts.extra_per_class;
        if !keep_task && !keep_extra {
            continue;
        }
        let rec = SampleRecord {
            image_path: format!("images/{}.png", r.id),
            ..r.clone()
        };
        write_gray16(&dir.join(&rec.image_path), &data.images[&r.id])?;
        let mask = &data.masks[&r.id];
        if mask.count() > 0 {
            write_mask(&mask_path(&masks_dir, &r.id), mask)?;
        }
        if keep_task {
            task.push(rec);
        } else {
            extra.push(rec);
        }
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &task)?;
    let extra_manifest = if extra.is_empty() {
        None
    } else {
        let p = dir.join("extra_manifest.csv");
        write_manifest(&p, &extra)?;
        Some(p)
    };

    let pretrain_manifest = if opts.pretrain_samples > 0 {
        let findings = opts.pretrain_findings.clamp(1, 4);
        let (samples, images) = synth_multilabel(findings, opts.pretrain_samples, &spec, &mut rng, exec)?;
        let pre_dir = dir.join("pretrain");
        std::fs::create_dir_all(&pre_dir)?;
        let mut rows = Vec::with_capacity(samples.len());
        for (id, targets) in samples {
            let image_path = format!("pretrain/{id}.png");
            write_gray16(&dir.join(&image_path), &images[&id])?;
            rows.push(PretrainRecord {
                id,
                image_path,
                targets,
            });
        }
        let p = dir.join("pretrain.csv");
        write_pretrain_manifest(&p, &rows)?;
        Some(p)
    } else {
        None
    };
    Ok(SynthOutput {
        manifest,
        masks_dir,
        extra_manifest,
        pretrain_manifest,
        records: task.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use distl_core::protocol::{read_manifest, Split};

    #[test]
    fn writes_manifests_images_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            train_per_class: 6,
            val_per_class: 2,
            external_per_class: 3,
            extra_per_class: 2,
            side: 16,
            pretrain_samples: 4,
            ..SynthOptions::default()
        };
        let out = cmd_synth(&opts, dir.path(), Execution::Sequential).unwrap();
        let task = read_manifest(&out.manifest).unwrap();
        assert_eq!(task.len(), 2 * (6 + 2 + 3));
        assert!(task.iter().all(|r| r.label.unwrap() < 2));
        assert!(task.iter().all(|r| dir.path().join(&r.image_path).exists()));
        let extra = read_manifest(out.extra_manifest.as_ref().unwrap()).unwrap();
        assert_eq!(extra.len(), 4);
        assert!(extra.iter().all(|r| r.split == Split::Train && r.label.unwrap() >= 2));
        let with_mask = task.iter().filter(|r| mask_path(&out.masks_dir, &r.id).exists()).count();
        assert_eq!(with_mask, 11);
        let pre = crate::data::read_pretrain_manifest(out.pretrain_manifest.as_ref().unwrap()).unwrap();
        assert_eq!(pre.len(), 4);
        assert!(pre.iter().all(|r| r.targets.len() == 3));
    }

    #[test]
    fn too_few_classes_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            classes: 1,
            ..SynthOptions::default()
        };
        assert!(matches!(cmd_synth(&opts, dir.path(), Execution::Sequential), Err(CliError::Usage(_))));
    }
}
