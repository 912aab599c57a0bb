//! Experiment orchestration for self-evolving distillation runs: configuration,
//! partitioning, the generation loop with resumable checkpoints, evaluation,
//! localization scoring and figure output.
//!
//! Each seed owns `<out>/seed_<seed>/`:
//!
//! ```text
//! partition/   labeled.csv, fold_<k>.csv, partition.json
//! checkpoints/ gen_<T>.ckpt, pretrain.ckpt
//! metrics/     gen_<T>_<split>.json, screening.json
//! plots/       auc_vs_T.{csv,json,svg,png}, auc_bars.*, attention_panel.*, delong.json
//! logs/        losses.jsonl
//! ledger.jsonl localization.json run.lock
//! ```

pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod ledger;
pub mod localize;
pub mod paths;
pub mod plot;
pub mod synth;
pub mod train;

pub use config::{ExperimentConfig, Variant};
pub use error::{CliError, CliResult};
pub use evaluate::{cmd_eval, summarize};
pub use ledger::{LedgerRecord, RunLedger, Status};
pub use localize::{cmd_localize, DiceReport, LocalizeOptions};
pub use paths::RunPaths;
pub use synth::{cmd_synth, SynthOptions};
pub use train::{cmd_partition, cmd_pretrain, cmd_run};
