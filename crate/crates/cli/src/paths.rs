//! Layout of a per-seed run directory.

use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(out_root: &Path, seed: u64) -> Self {
        RunPaths {
            root: out_root.join(format!("seed_{seed}")),
        }
    }

    pub fn partition_dir(&self) -> PathBuf {
        self.root.join("partition")
    }

    pub fn labeled(&self) -> PathBuf {
        self.partition_dir().join("labeled.csv")
    }

    pub fn fold(&self, k: usize) -> PathBuf {
        self.partition_dir().join(format!("fold_{k}.csv"))
    }

    pub fn partition_meta(&self) -> PathBuf {
        self.partition_dir().join("partition.json")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_rel(generation: usize) -> String {
        format!("checkpoints/gen_{generation}.ckpt")
    }

    pub fn checkpoint(&self, generation: usize) -> PathBuf {
        self.root.join(Self::checkpoint_rel(generation))
    }

    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("pretrain.ckpt")
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn metrics_rel(generation: usize, split: &str) -> String {
        format!("metrics/gen_{generation}_{split}.json")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("logs").join("losses.jsonl")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> crate::error::CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> crate::error::CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| crate::error::CliError::runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| crate::error::CliError::runtime(format!("{}: {e}", path.display())))
}
