//! Vision-transformer classifier with classification and projection heads,
//! attention extraction, and a small CNN adapter for GradCAM.
//!
//! Parameters live in one flat `f64` buffer addressed through a [`Layout`], so
//! optimizers, EMA updates, gradient buffers and checkpoints all work on plain
//! slices.

mod attention;
mod cnn;
mod layers;
mod vit;

pub use attention::{extract_attention, AttentionMap};
pub use cnn::{gradcam, gradcam_from_parts, CnnAdapter, CnnSpec, GradCam};
pub use layers::{log_softmax, softmax};
pub use vit::{forward, BatchOutput, ViewCache, ViewOutput};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DistlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub input_side: usize,
    pub patch_side: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub proj_dim: usize,
    /// Hidden width of both three-layer heads.
    pub head_hidden: usize,
    /// Width of the projection head before unit normalization.
    pub bottleneck_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_side: 256,
            patch_side: 32,
            depth: 4,
            heads: 2,
            embed_dim: 64,
            num_classes: 2,
            proj_dim: 256,
            head_hidden: 128,
            bottleneck_dim: 64,
            mlp_ratio: 4,
        }
    }
}

impl ModelSpec {
    /// ViT-small backbone at 256 px.
    pub fn vit_small(patch_side: usize, num_classes: usize) -> Self {
        ModelSpec {
            input_side: 256,
            patch_side,
            depth: 12,
            heads: 6,
            embed_dim: 384,
            num_classes,
            proj_dim: 256,
            head_hidden: 2048,
            bottleneck_dim: 256,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DistlError::InvalidSpec(m.to_string()));
        if self.patch_side == 0 || self.input_side == 0 {
            return bad("input_side and patch_side must be positive");
        }
        if self.input_side % self.patch_side != 0 {
            return bad("input_side must be divisible by patch_side");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be divisible by heads");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.num_classes == 0 || self.proj_dim == 0 || self.head_hidden == 0 || self.bottleneck_dim == 0 {
            return bad("head widths must be positive");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_side / self.patch_side
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Whether `side` is a valid input: a positive multiple of the patch side
    /// no larger than the full input side.
    pub fn supports_side(&self, side: usize) -> bool {
        side > 0 && side % self.patch_side == 0 && side <= self.input_side
    }
}

/// Location of one parameter tensor inside the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a>(&self, data: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.range()]).expect("slot shape")
    }

    pub fn mat_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut data[self.range()]).expect("slot shape")
    }

    pub fn vec<'a>(&self, data: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.range()])
    }

    pub fn vec_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut data[self.range()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub slot: Slot,
    pub init: Init,
    /// Weight decay applies to matrices only.
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub qkv_w: Slot,
    pub qkv_b: Slot,
    pub proj_w: Slot,
    pub proj_b: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub fc1_w: Slot,
    pub fc1_b: Slot,
    pub fc2_w: Slot,
    pub fc2_b: Slot,
}

#[derive(Debug, Clone)]
pub struct HeadLayout {
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
    pub w3: Slot,
    pub b3: Slot,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub patch_w: Slot,
    pub patch_b: Slot,
    pub cls_token: Slot,
    pub pos_embed: Slot,
    pub blocks: Vec<BlockLayout>,
    pub norm_g: Slot,
    pub norm_b: Slot,
    pub cls_head: HeadLayout,
    pub proj_head: HeadLayout,
    /// Prototype layer applied after unit normalization (no bias).
    pub proj_last: Slot,
    pub entries: Vec<Entry>,
    pub total: usize,
}

struct LayoutBuilder {
    entries: Vec<Entry>,
    offset: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init, decay: bool) -> Slot {
        let slot = Slot {
            offset: self.offset,
            rows,
            cols,
        };
        self.offset += rows * cols;
        self.entries.push(Entry { name, slot, init, decay });
        slot
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> Slot {
        self.add(name, rows, cols, Init::TruncNormal, true)
    }

    fn bias(&mut self, name: String, len: usize) -> Slot {
        self.add(name, 1, len, Init::Zeros, false)
    }

    fn head(&mut self, prefix: &str, input: usize, hidden: usize, out: usize) -> HeadLayout {
        HeadLayout {
            w1: self.weight(format!("{prefix}.w1"), input, hidden),
            b1: self.bias(format!("{prefix}.b1"), hidden),
            w2: self.weight(format!("{prefix}.w2"), hidden, hidden),
            b2: self.bias(format!("{prefix}.b2"), hidden),
            w3: self.weight(format!("{prefix}.w3"), hidden, out),
            b3: self.bias(format!("{prefix}.b3"), out),
        }
    }
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Self {
        let d = spec.embed_dim;
        let p2 = spec.patch_side * spec.patch_side;
        let tokens = spec.grid() * spec.grid() + 1;
        let mut b = LayoutBuilder {
            entries: Vec::new(),
            offset: 0,
        };
        let patch_w = b.weight("patch_embed.w".into(), p2, d);
        let patch_b = b.bias("patch_embed.b".into(), d);
        let cls_token = b.add("cls_token".into(), 1, d, Init::TruncNormal, false);
        let pos_embed = b.add("pos_embed".into(), tokens, d, Init::TruncNormal, false);
        let hidden = d * spec.mlp_ratio;
        let blocks = (0..spec.depth)
            .map(|i| BlockLayout {
                ln1_g: b.add(format!("blocks.{i}.ln1.g"), 1, d, Init::Ones, false),
                ln1_b: b.bias(format!("blocks.{i}.ln1.b"), d),
                qkv_w: b.weight(format!("blocks.{i}.attn.qkv.w"), d, 3 * d),
                qkv_b: b.bias(format!("blocks.{i}.attn.qkv.b"), 3 * d),
                proj_w: b.weight(format!("blocks.{i}.attn.proj.w"), d, d),
                proj_b: b.bias(format!("blocks.{i}.attn.proj.b"), d),
                ln2_g: b.add(format!("blocks.{i}.ln2.g"), 1, d, Init::Ones, false),
                ln2_b: b.bias(format!("blocks.{i}.ln2.b"), d),
                fc1_w: b.weight(format!("blocks.{i}.mlp.fc1.w"), d, hidden),
                fc1_b: b.bias(format!("blocks.{i}.mlp.fc1.b"), hidden),
                fc2_w: b.weight(format!("blocks.{i}.mlp.fc2.w"), hidden, d),
                fc2_b: b.bias(format!("blocks.{i}.mlp.fc2.b"), d),
            })
            .collect();
        let norm_g = b.add("norm.g".into(), 1, d, Init::Ones, false);
        let norm_b = b.bias("norm.b".into(), d);
        let cls_head = b.head("cls_head", d, spec.head_hidden, spec.num_classes);
        let proj_head = b.head("proj_head", d, spec.head_hidden, spec.bottleneck_dim);
        let proj_last = b.weight("proj_head.last".into(), spec.bottleneck_dim, spec.proj_dim);
        Layout {
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
            norm_g,
            norm_b,
            cls_head,
            proj_head,
            proj_last,
            total: b.offset,
            entries: b.entries,
        }
    }

    /// Entries belonging to the classification head.
    pub fn cls_head_entries(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| e.name.starts_with("cls_head."))
    }

    /// Per-element weight-decay mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for e in &self.entries {
            if e.decay {
                mask[e.slot.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

/// Model parameters: a `ModelSpec` plus one flat buffer.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub layout: std::sync::Arc<Layout>,
    pub data: Vec<f64>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.data == other.data
    }
}

pub const INIT_STD: f64 = 0.02;

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

fn init_slot<R: Rng + ?Sized>(data: &mut [f64], entry: &Entry, rng: &mut R) {
    let dst = &mut data[entry.slot.range()];
    match entry.init {
        Init::Zeros => dst.fill(0.0),
        Init::Ones => dst.fill(1.0),
        Init::TruncNormal => dst.iter_mut().for_each(|v| *v = trunc_normal(rng, INIT_STD)),
    }
}

/// Initializes parameters: truncated normal (std 0.02) for weights and
/// embeddings, zeros for biases, ones for norm gains.
pub fn build_model<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<ModelParams> {
    spec.validate()?;
    let layout = Layout::new(spec);
    let mut data = vec![0.0; layout.total];
    for entry in &layout.entries {
        init_slot(&mut data, entry, rng);
    }
    Ok(ModelParams {
        spec: *spec,
        layout: std::sync::Arc::new(layout),
        data,
    })
}

impl ModelParams {
    pub fn from_data(spec: ModelSpec, data: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        if layout.total != data.len() {
            return Err(DistlError::Format(format!(
                "parameter buffer has {} values, spec needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(ModelParams {
            spec,
            layout: std::sync::Arc::new(layout),
            data,
        })
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Replaces the classification head with a freshly initialized one of
    /// `num_classes` outputs; every other parameter is kept.
    pub fn reset_classifier<R: Rng + ?Sized>(&self, num_classes: usize, rng: &mut R) -> Result<ModelParams> {
        let spec = ModelSpec {
            num_classes,
            ..self.spec
        };
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut data = vec![0.0; layout.total];
        for (new, old) in layout.entries.iter().zip(&self.layout.entries) {
            if new.name.starts_with("cls_head.") {
                init_slot(&mut data, new, rng);
            } else {
                debug_assert_eq!(new.name, old.name);
                data[new.slot.range()].copy_from_slice(&self.data[old.slot.range()]);
            }
        }
        Ok(ModelParams {
            spec,
            layout: std::sync::Arc::new(layout),
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn indivisible_patch_is_rejected() {
        let spec = ModelSpec {
            input_side: 30,
            patch_side: 8,
            ..Default::default()
        };
        let err = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, DistlError::InvalidSpec(_)));
    }

    #[test]
    fn layout_is_contiguous() {
        let layout = Layout::new(&ModelSpec::default());
        let mut offset = 0;
        for e in &layout.entries {
            assert_eq!(e.slot.offset, offset, "{}", e.name);
            offset += e.slot.len();
        }
        assert_eq!(offset, layout.total);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = ModelSpec {
            input_side: 32,
            patch_side: 8,
            embed_dim: 16,
            head_hidden: 16,
            bottleneck_dim: 8,
            proj_dim: 16,
            ..Default::default()
        };
        let a = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| v.abs() <= 1.0));
        for e in &a.layout.entries {
            let vals = &a.data[e.slot.range()];
            match e.init {
                Init::Zeros => assert!(vals.iter().all(|&v| v == 0.0)),
                Init::Ones => assert!(vals.iter().all(|&v| v == 1.0)),
                Init::TruncNormal => assert!(vals.iter().all(|v| v.abs() <= 2.0 * INIT_STD)),
            }
        }
    }

    #[test]
    fn reset_classifier_keeps_backbone() {
        let spec = ModelSpec {
            input_side: 16,
            patch_side: 8,
            embed_dim: 8,
            head_hidden: 8,
            bottleneck_dim: 4,
            proj_dim: 8,
            num_classes: 5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = build_model(&spec, &mut rng).unwrap();
        let b = a.reset_classifier(2, &mut rng).unwrap();
        assert_eq!(b.spec.num_classes, 2);
        assert_eq!(
            a.data[a.layout.patch_w.range()],
            b.data[b.layout.patch_w.range()]
        );
        assert_eq!(
            a.data[a.layout.proj_last.range()],
            b.data[b.layout.proj_last.range()]
        );
        assert_eq!(b.layout.cls_head.w3.cols, 2);
    }
}
