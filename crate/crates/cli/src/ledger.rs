//! Append-only per-generation run ledger and the run-directory lock.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub generation: usize,
    /// Relative to the run directory.
    pub checkpoint: Option<String>,
    /// Metrics files, relative to the run directory.
    pub metrics: Vec<String>,
    pub wall_time_s: f64,
    pub config_hash: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunLedger {
    path: PathBuf,
    pub records: Vec<LedgerRecord>,
}

impl RunLedger {
    pub const FILE: &'static str = "ledger.jsonl";

    /// Opens the ledger of `run_dir`, empty if it does not exist yet.
    pub fn open(run_dir: &Path) -> CliResult<Self> {
        let path = run_dir.join(Self::FILE);
        let mut records = Vec::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: LedgerRecord = serde_json::from_str(&line).map_err(|e| {
                    CliError::runtime(format!("{} line {}: {e}", path.display(), i + 1))
                })?;
                records.push(rec);
            }
        }
        Ok(RunLedger { path, records })
    }

    /// Refuses to continue a run recorded under a different configuration.
    pub fn check_hash(&self, hash: &str) -> CliResult<()> {
        match self.records.iter().find(|r| r.config_hash != hash) {
            Some(r) => Err(CliError::usage(format!(
                "{} was written with config hash {}, current config hashes to {hash}; use a fresh output directory",
                self.path.display(),
                r.config_hash
            ))),
            None => Ok(()),
        }
    }

    pub fn append(&mut self, rec: LedgerRecord) -> CliResult<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        f.sync_all()?;
        self.records.push(rec);
        Ok(())
    }

    /// Successful generations, latest record per generation, in order.
    pub fn completed(&self) -> Vec<&LedgerRecord> {
        let mut out: Vec<&LedgerRecord> = Vec::new();
        for r in self.records.iter().filter(|r| r.status == Status::Ok) {
            match out.iter_mut().find(|o| o.generation == r.generation) {
                Some(slot) => *slot = r,
                None => out.push(r),
            }
        }
        out.sort_by_key(|r| r.generation);
        out
    }

    /// Highest generation `g` such that every generation `0..=g` completed.
    pub fn last_contiguous(&self) -> Option<usize> {
        let done = self.completed();
        let mut last = None;
        for (expect, r) in done.iter().enumerate() {
            if r.generation != expect {
                break;
            }
            last = Some(expect);
        }
        last
    }
}

/// Exclusive ownership of a run directory; removed on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub const FILE: &'static str = "run.lock";

    pub fn acquire(run_dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(run_dir)?;
        let path = run_dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::runtime(format!(
                "{} exists: another process owns this run directory (remove the file if it is stale)",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(generation: usize, status: Status) -> LedgerRecord {
        LedgerRecord {
            generation,
            checkpoint: Some(format!("checkpoints/gen_{generation}.ckpt")),
            metrics: Vec::new(),
            wall_time_s: 1.0,
            config_hash: "abc".into(),
            status,
            error: None,
        }
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut ledger = RunLedger::open(dir.path()).unwrap();
        assert_eq!(ledger.last_contiguous(), None);
        ledger.append(rec(0, Status::Ok)).unwrap();
        ledger.append(rec(1, Status::Failed)).unwrap();
        let reopened = RunLedger::open(dir.path()).unwrap();
        assert_eq!(reopened.records, ledger.records);
        assert_eq!(reopened.last_contiguous(), Some(0));
        ledger.append(rec(1, Status::Ok)).unwrap();
        assert_eq!(ledger.last_contiguous(), Some(1));
        assert!(ledger.check_hash("abc").is_ok());
        assert!(matches!(ledger.check_hash("def"), Err(CliError::Usage(_))));
    }

    #[test]
    fn gaps_stop_the_contiguous_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let mut ledger = RunLedger::open(dir.path()).unwrap();
        ledger.append(rec(0, Status::Ok)).unwrap();
        ledger.append(rec(2, Status::Ok)).unwrap();
        assert_eq!(ledger.last_contiguous(), Some(0));
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }
}
