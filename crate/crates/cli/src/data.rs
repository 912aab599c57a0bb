//! Manifest, image and mask loading for commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use distl_core::eval::BinaryMask;
use distl_core::pipeline::ImageTensor;
use distl_core::protocol::{read_manifest, ImageStore, SampleRecord, Split};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Independent random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Training = 0,
    Injection = 1,
    Corruption = 2,
    Baseline = 3,
    Adapter = 4,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Root for relative image paths of the manifest at `manifest`.
pub fn image_root_for(cfg: &ExperimentConfig, manifest: &Path) -> PathBuf {
    cfg.data
        .image_root
        .clone()
        .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

pub fn load_manifest(path: &Path) -> CliResult<Vec<SampleRecord>> {
    if !path.is_file() {
        return Err(CliError::usage(format!("manifest {} not found", path.display())));
    }
    read_manifest(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn load_images(cfg: &ExperimentConfig, records: &[SampleRecord], root: &Path) -> CliResult<ImageStore> {
    Ok(ImageStore::load(records, root, &cfg.preprocess, cfg.distill.execution)?)
}

/// Class names indexed by label, from the labeled records of a manifest.
pub fn class_names(records: &[SampleRecord], num_classes: usize) -> CliResult<Vec<String>> {
    let named: BTreeMap<usize, String> = distl_core::protocol::class_names(records);
    if let Some((&label, _)) = named.iter().find(|(&l, _)| l >= num_classes) {
        return Err(CliError::usage(format!(
            "manifest label {label} exceeds model.num_classes = {num_classes}"
        )));
    }
    Ok((0..num_classes)
        .map(|c| named.get(&c).cloned().unwrap_or_else(|| format!("class_{c}")))
        .collect())
}

/// Labeled records of one split with binary targets (`label ≠ 0`).
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub name: &'static str,
    pub records: Vec<SampleRecord>,
    pub images: Vec<ImageTensor>,
    pub labels: Vec<bool>,
    pub sites: Vec<String>,
}

impl EvalSplit {
    pub fn load(cfg: &ExperimentConfig, manifest: &[SampleRecord], split: Split) -> CliResult<Self> {
        let records: Vec<SampleRecord> = manifest
            .iter()
            .filter(|r| r.split == split && r.label.is_some())
            .cloned()
            .collect();
        let store = load_images(cfg, &records, &cfg.image_root())?;
        let images = records
            .iter()
            .map(|r| store.get(&r.id).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EvalSplit {
            name: split_name(split),
            labels: records.iter().map(|r| r.label != Some(0)).collect(),
            sites: records
                .iter()
                .map(|r| r.site.clone().unwrap_or_else(|| "unknown".into()))
                .collect(),
            images,
            records,
        })
    }

    pub fn refs(&self) -> Vec<&ImageTensor> {
        self.images.iter().collect()
    }
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::InternalVal => "internal_val",
        Split::ExternalTest => "external_test",
    }
}

pub fn parse_split(name: &str) -> CliResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "internal_val" => Ok(Split::InternalVal),
        "external_test" => Ok(Split::ExternalTest),
        other => Err(CliError::usage(format!(
            "unknown split {other:?} (train, internal_val, external_test)"
        ))),
    }
}

pub const PRETRAIN_HEADER: [&str; 3] = ["id", "image_path", "targets"];

/// One multi-label pretraining row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainRecord {
    pub id: String,
    pub image_path: String,
    pub targets: Vec<bool>,
}

pub fn read_pretrain_manifest(path: &Path) -> CliResult<Vec<PretrainRecord>> {
    let bad = |m: String| CliError::usage(format!("{}: {m}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != PRETRAIN_HEADER {
        return Err(bad(format!("header must be {}", PRETRAIN_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let targets = row[2]
            .split(';')
            .map(|t| match t.trim() {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(bad(format!("target {other:?} is not 0 or 1"))),
            })
            .collect::<CliResult<Vec<bool>>>()?;
        out.push(PretrainRecord {
            id: row[0].to_string(),
            image_path: row[1].to_string(),
            targets,
        });
    }
    Ok(out)
}

pub fn write_pretrain_manifest(path: &Path, rows: &[PretrainRecord]) -> CliResult<()> {
    let err = |e: csv::Error| CliError::runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(PRETRAIN_HEADER).map_err(err)?;
    for r in rows {
        let targets: Vec<&str> = r.targets.iter().map(|&t| if t { "1" } else { "0" }).collect();
        w.write_record([r.id.as_str(), r.image_path.as_str(), &targets.join(";")])
            .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_mask.png"))
}

/// Reads a mask PNG (nonzero = lesion), resampled by nearest neighbour to
/// `side`×`side` when needed.
pub fn read_mask(path: &Path, side: usize) -> CliResult<BinaryMask> {
    let img = image::open(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let grid = Array2::from_shape_fn((side, side), |(r, c)| {
        img.get_pixel((c * w / side) as u32, (r * h / side) as u32).0[0] > 127
    });
    Ok(BinaryMask(grid))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> CliResult<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.0[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    img.save(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretrain_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.csv");
        let rows = vec![
            PretrainRecord {
                id: "a".into(),
                image_path: "a.png".into(),
                targets: vec![true, false, true],
            },
            PretrainRecord {
                id: "b".into(),
                image_path: "b.png".into(),
                targets: vec![false, false, false],
            },
        ];
        write_pretrain_manifest(&path, &rows).unwrap();
        assert_eq!(read_pretrain_manifest(&path).unwrap(), rows);
        std::fs::write(&path, "id,image_path,targets\na,a.png,1;2\n").unwrap();
        assert!(matches!(read_pretrain_manifest(&path), Err(CliError::Usage(_))));
    }

    #[test]
    fn mask_roundtrip_and_resample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut m = BinaryMask::empty(8, 8);
        m.0[[2, 3]] = true;
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path, 8).unwrap(), m);
        let up = read_mask(&path, 16).unwrap();
        assert_eq!(up.count(), 4);
        assert!(up.0[[4, 6]] && up.0[[5, 7]]);
    }

    #[test]
    fn streams_differ() {
        use rand::RngCore;
        let a = rng_for(7, Stream::Training).next_u64();
        let b = rng_for(7, Stream::Injection).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, rng_for(7, Stream::Training).next_u64());
    }
}
