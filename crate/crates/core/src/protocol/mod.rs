//! Manifests, labeled/unlabeled partitioning, the growing-pool schedule,
//! robustness injectors and the synthetic dataset generator.

mod partition;
mod synth;

pub use partition::{
    corrupt_labels, inject_unseen, make_partition, pool_at, DataPartition, GenerationSchedule,
};
pub use synth::{class_name as synth_class_name, synth_dataset, synth_multilabel, SiteShift, SynthDataset, SynthSpec};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};
use crate::par::{self, Execution};
use crate::pipeline::{preprocess_image, ImageTensor, PreprocessOptions};

pub const MANIFEST_HEADER: [&str; 6] = ["id", "image_path", "label", "class_name", "site", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    InternalVal,
    ExternalTest,
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub label: Option<usize>,
    pub class_name: Option<String>,
    pub site: Option<String>,
    pub split: Split,
    /// Set on records added by [`inject_unseen`]; never written to manifests.
    #[serde(skip)]
    pub injected: bool,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, label: Option<usize>, split: Split) -> Self {
        let id = id.into();
        SampleRecord {
            image_path: format!("{id}.png"),
            id,
            label,
            class_name: None,
            site: None,
            split,
            injected: false,
        }
    }
}

/// Checks id uniqueness and that every label maps to one class name.
pub fn validate_manifest(records: &[SampleRecord]) -> Result<()> {
    let mut ids = HashSet::new();
    let mut names: HashMap<usize, &str> = HashMap::new();
    for r in records {
        if !ids.insert(r.id.as_str()) {
            return Err(invalid_input(format!("duplicate id {:?} in manifest", r.id)));
        }
        if let (Some(label), Some(name)) = (r.label, r.class_name.as_deref()) {
            match names.get(&label) {
                Some(prev) if *prev != name => {
                    return Err(invalid_input(format!(
                        "label {label} is named both {prev:?} and {name:?}"
                    )))
                }
                _ => {
                    names.insert(label, name);
                }
            }
        }
    }
    Ok(())
}

/// Reads a manifest (`id,image_path,label,class_name,site,split`).
pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != MANIFEST_HEADER {
        return Err(invalid_input(format!(
            "{}: manifest header must be {}",
            path.display(),
            MANIFEST_HEADER.join(",")
        )));
    }
    let records = reader
        .deserialize()
        .collect::<std::result::Result<Vec<SampleRecord>, _>>()?;
    validate_manifest(&records)?;
    Ok(records)
}

/// Writes records in the given order.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

/// Class-index → name map gathered from labeled records.
pub fn class_names(records: &[SampleRecord]) -> BTreeMap<usize, String> {
    records
        .iter()
        .filter_map(|r| Some((r.label?, r.class_name.clone()?)))
        .collect()
}

/// Preprocessed images keyed by record id.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    images: HashMap<String, ImageTensor>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, img: ImageTensor) {
        self.images.insert(id.into(), img);
    }

    pub fn get(&self, id: &str) -> Result<&ImageTensor> {
        self.images
            .get(id)
            .ok_or_else(|| invalid_input(format!("no image loaded for record {id:?}")))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads and preprocesses every record's image; relative paths resolve
    /// against `root`.
    pub fn load(records: &[SampleRecord], root: &Path, opts: &PreprocessOptions, exec: Execution) -> Result<Self> {
        let loaded = par::map(exec, records, |r| -> Result<(String, ImageTensor)> {
            let raw = read_gray(&root.join(&r.image_path))?;
            Ok((r.id.clone(), preprocess_image(raw.view(), opts)?))
        });
        let mut store = ImageStore::new();
        for item in loaded {
            let (id, img) = item?;
            store.insert(id, img);
        }
        Ok(store)
    }

    /// Preprocesses in-memory raw grids.
    pub fn from_raw(
        raw: &HashMap<String, ndarray::Array2<f64>>,
        opts: &PreprocessOptions,
        exec: Execution,
    ) -> Result<Self> {
        let mut ids: Vec<&String> = raw.keys().collect();
        ids.sort();
        let processed = par::map(exec, &ids, |id| preprocess_image(raw[*id].view(), opts));
        let mut store = ImageStore::new();
        for (id, img) in ids.into_iter().zip(processed) {
            store.insert(id.clone(), img?);
        }
        Ok(store)
    }
}

/// Reads an 8- or 16-bit grayscale raster into raw intensities.
pub fn read_gray(path: &Path) -> Result<ndarray::Array2<f64>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(ndarray::Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] as f64
    }))
}

/// Writes a `[0, 1]` grid as a 16-bit grayscale PNG.
pub fn write_gray16(path: &Path, pixels: &ndarray::Array2<f64>) -> Result<()> {
    let (h, w) = pixels.dim();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let v = pixels[[y as usize, x as usize]].clamp(0.0, 1.0);
        image::Luma([(v * 65535.0).round() as u16])
    });
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_keeps_row_order_and_empty_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut a = SampleRecord::new("b", Some(1), Split::Train);
        a.class_name = Some("tb".into());
        a.site = Some("x".into());
        let c = SampleRecord::new("a", None, Split::ExternalTest);
        write_manifest(&path, &[a.clone(), c.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,image_path,label,class_name,site,split\n"));
        assert!(text.contains("a,a.png,,,,external_test"));
        assert_eq!(read_manifest(&path).unwrap(), vec![a, c]);
    }

    #[test]
    fn wrong_header_and_duplicates_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "id,path,label,class_name,site,split\n").unwrap();
        assert!(read_manifest(&path).is_err());
        std::fs::write(
            &path,
            "id,image_path,label,class_name,site,split\nx,x.png,0,n,,train\nx,y.png,0,n,,train\n",
        )
        .unwrap();
        assert!(read_manifest(&path).is_err());
        std::fs::write(
            &path,
            "id,image_path,label,class_name,site,split\nx,x.png,0,n,,train\ny,y.png,0,m,,train\n",
        )
        .unwrap();
        assert!(read_manifest(&path).is_err());
    }

    #[test]
    fn png_roundtrip_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let grid = ndarray::Array2::from_shape_fn((12, 12), |(r, c)| (r * 12 + c) as f64 / 143.0);
        write_gray16(&dir.path().join("a.png"), &grid).unwrap();
        let raw = read_gray(&dir.path().join("a.png")).unwrap();
        assert_eq!(raw.dim(), (12, 12));
        assert_eq!(raw[[11, 11]], 65535.0);
        let rec = SampleRecord::new("a", Some(0), Split::Train);
        let opts = PreprocessOptions { side: 8, ..Default::default() };
        let store = ImageStore::load(&[rec], dir.path(), &opts, Execution::Sequential).unwrap();
        assert_eq!(store.get("a").unwrap().pixels().dim(), (8, 8));
        assert!(store.get("missing").is_err());
    }
}
