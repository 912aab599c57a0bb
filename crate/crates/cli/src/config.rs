//! Experiment configuration (TOML, schema version 1).

use std::path::{Path, PathBuf};

use distl_core::distill::{DistillConfig, SupervisedConfig};
use distl_core::model::ModelSpec;
use distl_core::pipeline::PreprocessOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const OUT_ENV: &str = "DISTL_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BaselineSupervised,
    Distl,
    DistlUnseenInjection,
    SupervisedLabelCorruption,
}

impl Variant {
    pub fn is_supervised(self) -> bool {
        matches!(self, Variant::BaselineSupervised | Variant::SupervisedLabelCorruption)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    /// Root for relative image paths; defaults to the manifest's directory.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    /// Directory of `<id>_mask.png` lesion masks.
    #[serde(default)]
    pub masks_dir: Option<PathBuf>,
    /// Out-of-task records for the unseen-class variant.
    #[serde(default)]
    pub extra_manifest: Option<PathBuf>,
    /// `id,image_path,targets` with `;`-separated 0/1 targets.
    #[serde(default)]
    pub pretrain_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub labeled_frac: f64,
    pub folds: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            labeled_frac: 0.1,
            folds: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_max: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { t_max: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub train: SupervisedConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            enabled: false,
            train: SupervisedConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    pub corruption_p: f64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig { corruption_p: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub min_sensitivity: f64,
    pub attention_threshold: f64,
    pub gradcam_threshold: f64,
    pub screening_prevalence: f64,
    pub screening_samples: usize,
    /// Positive external images rendered in the attention panel.
    pub panel_images: usize,
    /// Train the small CNN adapter for the GradCAM comparison column.
    pub gradcam: bool,
    pub cnn_epochs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            min_sensitivity: distl_core::eval::MIN_SENSITIVITY,
            attention_threshold: distl_core::eval::VIT_ATTENTION_THRESHOLD,
            gradcam_threshold: distl_core::eval::GRADCAM_THRESHOLD,
            screening_prevalence: 0.1,
            screening_samples: 10_000,
            panel_images: 4,
            gradcam: false,
            cnn_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub task: String,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Stop after this generation (resume later with the same config).
    #[serde(default)]
    pub stop_after_generation: Option<usize>,
    pub data: DataConfig,
    #[serde(default)]
    pub preprocess: PreprocessOptions,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub initial: SupervisedConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    /// Training of the supervised comparator at each generation.
    #[serde(default)]
    pub supervised: SupervisedConfig,
    #[serde(default)]
    pub robustness: RobustnessConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    /// Loads the file and resolves relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.manifest);
        for p in [
            &mut self.data.image_root,
            &mut self.data.masks_dir,
            &mut self.data.extra_manifest,
            &mut self.data.pretrain_manifest,
            &mut self.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Checks schema version, ranges and that referenced paths exist.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::usage(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} unsupported (expected {CONFIG_VERSION})", self.version));
        }
        if self.seeds.is_empty() {
            return bad("`seeds` must list at least one seed".into());
        }
        if !self.data.manifest.is_file() {
            return bad(format!("manifest {} not found", self.data.manifest.display()));
        }
        for p in [&self.data.masks_dir, &self.data.extra_manifest, &self.data.pretrain_manifest]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return bad(format!("{} not found", p.display()));
            }
        }
        if self.variant == Variant::DistlUnseenInjection && self.data.extra_manifest.is_none() {
            return bad("variant distl_unseen_injection needs data.extra_manifest".into());
        }
        if self.pretrain.enabled && self.data.pretrain_manifest.is_none() {
            return bad("pretraining enabled without data.pretrain_manifest".into());
        }
        if self.preprocess.side != self.model.input_side {
            return bad(format!(
                "preprocess.side {} must equal model.input_side {}",
                self.preprocess.side, self.model.input_side
            ));
        }
        self.model.validate().map_err(CliError::usage)?;
        self.distill.validate().map_err(CliError::usage)?;
        self.initial.validate().map_err(CliError::usage)?;
        self.supervised.validate().map_err(CliError::usage)?;
        if !(0.0..=1.0).contains(&self.robustness.corruption_p) {
            return bad("robustness.corruption_p must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn image_root(&self) -> PathBuf {
        self.data.image_root.clone().unwrap_or_else(|| {
            self.data
                .manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default()
        })
    }

    /// Output root: `--out`, then `$DISTL_OUT`, then `out_dir`, then `runs/<task>`.
    pub fn resolve_out(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_ENV) {
            return PathBuf::from(p);
        }
        self.out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.task))
    }

    /// SHA-256 of the settings that determine one seed's training results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        // each seed owns its own run directory
        c.seeds.clear();
        c.out_dir = None;
        c.stop_after_generation = None;
        c.eval = EvalConfig::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
task = "toy"
variant = "distl"
seeds = [1]
[data]
manifest = "m.csv"
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.partition.folds, 3);
        assert_eq!(cfg.schedule.t_max, 3);
        assert_eq!(cfg.distill.correction_interval, 500);
        assert_eq!(cfg.eval.attention_threshold, 0.1);
        assert_eq!(cfg.eval.gradcam_threshold, 0.6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[distill]\nlearning_rate = 1.0\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = MINIMAL.replace("seeds = [1]", "seeds = [1]\ncolour = 3");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn hash_ignores_seed_list_output_and_interruption() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.out_dir = Some("elsewhere".into());
        b.stop_after_generation = Some(1);
        b.seeds = vec![4, 5];
        assert_eq!(a.hash(), b.hash());
        b.distill.max_lr *= 2.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_catches_missing_manifest_and_version() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert!(cfg.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.csv"), "id,image_path,label,class_name,site,split\n").unwrap();
        let mut cfg = ExperimentConfig::from_toml(&MINIMAL.replace("m.csv", "m.csv")).unwrap();
        cfg.resolve_paths(dir.path());
        cfg.model.input_side = 256;
        cfg.validate().unwrap();
        cfg.version = 2;
        assert!(cfg.validate().is_err());
    }
}
