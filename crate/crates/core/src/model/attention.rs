use ndarray::{s, Array2, Array3};

use super::ModelParams;
use crate::error::{invalid_input, Result};
use crate::pipeline::ImageTensor;

/// Class-token attention over the patch grid, one map per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// Raw class-token attention rows (`heads × tokens`, class token first).
    pub rows: Array2<f64>,
    /// Per-head min-max normalized patch maps (`heads × grid × grid`).
    pub maps: Array3<f64>,
}

impl AttentionMap {
    /// Builds per-head maps from class-token attention rows. A constant map
    /// normalizes to all zeros.
    pub fn from_class_rows(rows: Array2<f64>, grid: usize) -> Result<Self> {
        let heads = rows.nrows();
        if rows.ncols() != grid * grid + 1 {
            return Err(invalid_input(format!(
                "attention rows have {} tokens, grid {grid} needs {}",
                rows.ncols(),
                grid * grid + 1
            )));
        }
        let mut maps = Array3::zeros((heads, grid, grid));
        for h in 0..heads {
            let patch = rows.slice(s![h, 1..]);
            let lo = patch.fold(f64::INFINITY, |m, &v| m.min(v));
            let hi = patch.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let range = hi - lo;
            for (i, &v) in patch.iter().enumerate() {
                maps[[h, i / grid, i % grid]] = if range > 0.0 { (v - lo) / range } else { 0.0 };
            }
        }
        Ok(AttentionMap { rows, maps })
    }

    pub fn heads(&self) -> usize {
        self.maps.dim().0
    }

    pub fn grid(&self) -> usize {
        self.maps.dim().1
    }

    /// Nearest-neighbour upsampling of one head's map to `side`×`side`.
    pub fn upsample(&self, head: usize, side: usize) -> Array2<f64> {
        let grid = self.grid();
        Array2::from_shape_fn((side, side), |(r, c)| {
            self.maps[[head, r * grid / side, c * grid / side]]
        })
    }
}

/// Last-layer class-token attention for a full-side image.
pub fn extract_attention(params: &ModelParams, img: &ImageTensor) -> Result<AttentionMap> {
    if img.side() != Some(params.spec.input_side) {
        return Err(invalid_input("attention extraction expects a full-side image"));
    }
    let (_, cache) = params.forward_view(img)?;
    let last = cache.last_attention();
    let tokens = last[0].ncols();
    let mut rows = Array2::zeros((last.len(), tokens));
    for (h, a) in last.iter().enumerate() {
        rows.row_mut(h).assign(&a.row(0));
    }
    AttentionMap::from_class_rows(rows, params.spec.grid())
}
