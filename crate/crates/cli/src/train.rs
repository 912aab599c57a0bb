//! `partition`, `pretrain` and `run`.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use distl_core::distill::{
    evolve_generation, pretrain_multilabel, train_initial, train_supervised, Checkpoint, LossRecord,
};
use distl_core::model::build_model;
use distl_core::pipeline::ImageTensor;
use distl_core::protocol::{
    corrupt_labels, inject_unseen, make_partition, pool_at, read_manifest, write_manifest, DataPartition,
    GenerationSchedule, ImageStore, SampleRecord, Split,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Variant};
use crate::data::{
    class_names, image_root_for, load_images, load_manifest, read_pretrain_manifest, rng_for, EvalSplit, Stream,
};
use crate::error::{CliError, CliResult};
use crate::evaluate::evaluate_generation;
use crate::ledger::{LedgerRecord, RunLedger, RunLock, Status};
use crate::paths::{read_json, write_json, RunPaths};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PartitionMeta {
    labeled_frac: f64,
    folds: usize,
    seed: u64,
    labeled: usize,
    fold_sizes: Vec<usize>,
}

/// Splits the manifest's train records and writes `labeled.csv` plus one
/// `fold_k.csv` per unlabeled fold.
pub fn cmd_partition(cfg: &ExperimentConfig, out_root: &Path, seed: u64) -> CliResult<DataPartition> {
    let paths = RunPaths::new(out_root, seed);
    let _lock = RunLock::acquire(&paths.root)?;
    write_partition(cfg, &paths, seed)
}

fn write_partition(cfg: &ExperimentConfig, paths: &RunPaths, seed: u64) -> CliResult<DataPartition> {
    let manifest = load_manifest(&cfg.data.manifest)?;
    let partition = make_partition(&manifest, cfg.partition.labeled_frac, cfg.partition.folds, seed)?;
    let dir = paths.partition_dir();
    std::fs::create_dir_all(&dir)?;
    for entry in std::fs::read_dir(&dir)? {
        let p = entry?.path();
        let stale = p
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("fold_") && n.ends_with(".csv"));
        if stale {
            std::fs::remove_file(p)?;
        }
    }
    write_manifest(&paths.labeled(), &partition.labeled)?;
    for (k, fold) in partition.folds.iter().enumerate() {
        write_manifest(&paths.fold(k), fold)?;
    }
    write_json(
        &paths.partition_meta(),
        &PartitionMeta {
            labeled_frac: partition.labeled_frac,
            folds: partition.folds.len(),
            seed,
            labeled: partition.labeled.len(),
            fold_sizes: partition.folds.iter().map(Vec::len).collect(),
        },
    )?;
    info!(
        "seed {seed}: {} labeled, folds {:?}",
        partition.labeled.len(),
        partition.folds.iter().map(Vec::len).collect::<Vec<_>>()
    );
    Ok(partition)
}

/// Reads the partition files of a run directory.
pub fn read_partition(paths: &RunPaths) -> CliResult<DataPartition> {
    let meta: PartitionMeta = read_json(&paths.partition_meta())?;
    let labeled = read_manifest(&paths.labeled())?;
    let folds = (0..meta.folds)
        .map(|k| read_manifest(&paths.fold(k)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DataPartition {
        labeled,
        folds,
        labeled_frac: meta.labeled_frac,
        seed: meta.seed,
    })
}

fn ensure_partition(cfg: &ExperimentConfig, paths: &RunPaths, seed: u64) -> CliResult<DataPartition> {
    if !paths.partition_meta().exists() {
        info!("seed {seed}: no partition found, creating one");
        return write_partition(cfg, paths, seed);
    }
    let partition = read_partition(paths)?;
    if partition.folds.len() != cfg.partition.folds || partition.seed != seed {
        return Err(CliError::usage(format!(
            "{} does not match the configured folds/seed; rerun `partition`",
            paths.partition_dir().display()
        )));
    }
    Ok(partition)
}

fn images_of<'a>(store: &'a ImageStore, records: &[SampleRecord]) -> CliResult<Vec<&'a ImageTensor>> {
    Ok(records.iter().map(|r| store.get(&r.id)).collect::<Result<_, _>>()?)
}

fn labeled_pairs<'a>(store: &'a ImageStore, records: &[SampleRecord]) -> CliResult<Vec<(&'a ImageTensor, usize)>> {
    records
        .iter()
        .map(|r| {
            let label = r
                .label
                .ok_or_else(|| CliError::usage(format!("record {:?} needs a label for supervised training", r.id)))?;
            Ok((store.get(&r.id)?, label))
        })
        .collect()
}

/// Multi-label pretraining; the result is `checkpoints/pretrain.ckpt`.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out_root: &Path, seed: u64) -> CliResult<Checkpoint> {
    let paths = RunPaths::new(out_root, seed);
    let _lock = RunLock::acquire(&paths.root)?;
    pretrain(cfg, &paths, seed)
}

fn pretrain(cfg: &ExperimentConfig, paths: &RunPaths, seed: u64) -> CliResult<Checkpoint> {
    let manifest = cfg
        .data
        .pretrain_manifest
        .as_deref()
        .ok_or_else(|| CliError::usage("pretraining needs data.pretrain_manifest"))?;
    let rows = read_pretrain_manifest(manifest)?;
    let records: Vec<SampleRecord> = rows
        .iter()
        .map(|r| SampleRecord {
            image_path: r.image_path.clone(),
            ..SampleRecord::new(r.id.clone(), None, Split::Train)
        })
        .collect();
    let store = load_images(cfg, &records, &image_root_for(cfg, manifest))?;
    let samples = rows
        .iter()
        .map(|r| Ok((store.get(&r.id)?, r.targets.as_slice())))
        .collect::<CliResult<Vec<_>>>()?;
    let (ckpt, losses) = pretrain_multilabel(
        &cfg.model,
        &samples,
        &cfg.pretrain.train,
        cfg.model.num_classes,
        rng_for(seed, Stream::Training),
    )?;
    info!("seed {seed}: pretraining losses {losses:?}");
    std::fs::create_dir_all(paths.checkpoint_dir())?;
    ckpt.save(&paths.pretrain_checkpoint())?;
    Ok(ckpt)
}

struct LossLog {
    out: BufWriter<std::fs::File>,
    error: Option<std::io::Error>,
}

impl LossLog {
    fn open(path: &Path) -> CliResult<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(LossLog {
            out: BufWriter::new(f),
            error: None,
        })
    }

    fn write(&mut self, rec: &LossRecord) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(rec).expect("loss record serializes");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error = Some(e);
        }
    }

    fn finish(&mut self) -> CliResult<()> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(())
    }
}

fn supervised_records(losses: &[f64], generation: usize, step: u64, lr: f64) -> Vec<LossRecord> {
    losses
        .iter()
        .map(|&l| LossRecord {
            generation,
            step,
            ssl_loss: None,
            selftrain_loss: None,
            supervised_loss: Some(l),
            correction: false,
            lr,
            momentum: 1.0,
        })
        .collect()
}

/// Everything a run needs in memory.
struct RunData {
    partition: DataPartition,
    /// Pool records for `T = 1..=t_max`.
    pools: Vec<Vec<SampleRecord>>,
    store: ImageStore,
    val: EvalSplit,
    ext: EvalSplit,
}

fn prepare(cfg: &ExperimentConfig, paths: &RunPaths, seed: u64) -> CliResult<RunData> {
    let manifest = load_manifest(&cfg.data.manifest)?;
    let names = class_names(&manifest, cfg.model.num_classes)?;
    let mut partition = ensure_partition(cfg, paths, seed)?;
    let t_max = cfg.schedule.t_max;
    let schedule = GenerationSchedule::linear(partition.folds.len(), t_max)?;
    let mut store = load_images(cfg, &partition.labeled, &cfg.image_root())?;

    if cfg.variant == Variant::SupervisedLabelCorruption {
        let mut rng = rng_for(seed, Stream::Corruption);
        for fold in partition.folds.iter_mut() {
            *fold = corrupt_labels(fold, cfg.robustness.corruption_p, &names, &mut rng)?;
        }
    }
    let pools = if cfg.variant == Variant::DistlUnseenInjection {
        let extra_path = cfg.data.extra_manifest.as_deref().expect("validated");
        let extra = load_manifest(extra_path)?;
        let extra_store = load_images(cfg, &extra, &image_root_for(cfg, extra_path))?;
        for r in &extra {
            store.insert(r.id.clone(), extra_store.get(&r.id)?.clone());
        }
        inject_unseen(&partition, &schedule, &extra, &mut rng_for(seed, Stream::Injection))?
    } else {
        (1..=t_max)
            .map(|t| pool_at(&partition, &schedule, t))
            .collect::<Result<_, _>>()?
    };
    let unlabeled: Vec<SampleRecord> = partition.folds.iter().flatten().cloned().collect();
    let fold_store = load_images(cfg, &unlabeled, &cfg.image_root())?;
    for r in &unlabeled {
        store.insert(r.id.clone(), fold_store.get(&r.id)?.clone());
    }
    Ok(RunData {
        partition,
        pools,
        store,
        val: EvalSplit::load(cfg, &manifest, Split::InternalVal)?,
        ext: EvalSplit::load(cfg, &manifest, Split::ExternalTest)?,
    })
}

fn initial_checkpoint(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    data: &RunData,
    seed: u64,
    log: &mut LossLog,
) -> CliResult<Checkpoint> {
    let (init, rng) = if cfg.pretrain.enabled {
        let pre = if paths.pretrain_checkpoint().exists() {
            Checkpoint::load(&paths.pretrain_checkpoint())?
        } else {
            pretrain(cfg, paths, seed)?
        };
        if pre.spec() != &cfg.model {
            return Err(CliError::usage(
                "pretraining checkpoint was built for a different model spec",
            ));
        }
        (pre.student, pre.rng)
    } else {
        let mut rng = rng_for(seed, Stream::Training);
        (build_model(&cfg.model, &mut rng)?, rng)
    };
    let labeled = labeled_pairs(&data.store, &data.partition.labeled)?;
    let (ckpt, losses) = train_initial(init, &labeled, &cfg.initial, rng)?;
    for rec in supervised_records(&losses, 0, 0, cfg.initial.lr) {
        log.write(&rec);
    }
    Ok(ckpt)
}

fn next_generation(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    data: &RunData,
    prev: &Checkpoint,
    t: usize,
    log: &mut LossLog,
) -> CliResult<Checkpoint> {
    let pool = &data.pools[t - 1];
    let labeled = labeled_pairs(&data.store, &data.partition.labeled)?;
    if cfg.variant.is_supervised() {
        // Comparator: retrain from the generation-0 model with the pool's labels revealed.
        let base = Checkpoint::load(&paths.checkpoint(0))?;
        let mut train = labeled;
        train.extend(labeled_pairs(&data.store, pool)?);
        let mut rng = prev.rng.clone();
        let mut params = base.teacher;
        let losses = train_supervised(&mut params, &train, &cfg.supervised, &mut rng)?;
        for rec in supervised_records(&losses, t, prev.global_step, cfg.supervised.lr) {
            log.write(&rec);
        }
        let mut ckpt = Checkpoint::new(params, rng);
        ckpt.generation = t;
        ckpt.global_step = prev.global_step;
        return Ok(ckpt);
    }
    let images = images_of(&data.store, pool)?;
    let ckpt = evolve_generation(prev, &images, &labeled, &cfg.distill, &mut |r| log.write(r))?;
    Ok(ckpt)
}

/// Runs (or resumes) every configured generation for one seed.
pub fn cmd_run(cfg: &ExperimentConfig, out_root: &Path, seed: u64) -> CliResult<RunLedger> {
    let paths = RunPaths::new(out_root, seed);
    let _lock = RunLock::acquire(&paths.root)?;
    let hash = cfg.hash();
    let mut ledger = RunLedger::open(&paths.root)?;
    ledger.check_hash(&hash)?;
    let data = prepare(cfg, &paths, seed)?;
    std::fs::create_dir_all(paths.checkpoint_dir())?;
    let mut log = LossLog::open(&paths.losses())?;

    let done = ledger.last_contiguous();
    let mut prev = match done {
        Some(g) => {
            info!("seed {seed}: resuming after generation {g}");
            Some(Checkpoint::load(&paths.checkpoint(g))?)
        }
        None => None,
    };
    let first = done.map_or(0, |g| g + 1);
    for t in first..=cfg.schedule.t_max {
        if let Some(stop) = cfg.stop_after_generation {
            if t > stop {
                info!("seed {seed}: stopping after generation {stop}");
                break;
            }
        }
        let started = Instant::now();
        let result = match &prev {
            None => initial_checkpoint(cfg, &paths, &data, seed, &mut log),
            Some(p) => next_generation(cfg, &paths, &data, p, t, &mut log),
        };
        let outcome = result.and_then(|ckpt| {
            log.finish()?;
            ckpt.save(&paths.checkpoint(t))?;
            let metrics = evaluate_generation(cfg, &paths, &ckpt.teacher, t, &[&data.val, &data.ext])?;
            Ok((ckpt, metrics))
        });
        let wall_time_s = started.elapsed().as_secs_f64();
        match outcome {
            Ok((ckpt, metrics)) => {
                info!("seed {seed}: generation {t} done in {wall_time_s:.1}s");
                ledger.append(LedgerRecord {
                    generation: t,
                    checkpoint: Some(RunPaths::checkpoint_rel(t)),
                    metrics,
                    wall_time_s,
                    config_hash: hash.clone(),
                    status: Status::Ok,
                    error: None,
                })?;
                prev = Some(ckpt);
            }
            Err(e) => {
                warn!("seed {seed}: generation {t} failed: {e}");
                ledger.append(LedgerRecord {
                    generation: t,
                    checkpoint: None,
                    metrics: Vec::new(),
                    wall_time_s,
                    config_hash: hash.clone(),
                    status: Status::Failed,
                    error: Some(e.to_string()),
                })?;
                return Err(CliError::runtime(format!("generation {t} failed: {e}")));
            }
        }
    }
    Ok(ledger)
}
