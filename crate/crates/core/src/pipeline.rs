//! Image preprocessing, weak augmentation and multi-crop view generation.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(pub Array2<f64>);

impl ImageTensor {
    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor(Array2::zeros((height, width)))
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    /// Side length of a square image, `None` otherwise.
    pub fn side(&self) -> Option<usize> {
        (self.height() == self.width()).then_some(self.height())
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessOptions {
    pub side: usize,
    pub blur: bool,
    pub blur_sigma: f64,
    pub blur_kernel: usize,
    pub equalize_bins: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            side: 256,
            blur: true,
            blur_sigma: 1.0,
            blur_kernel: 5,
            equalize_bins: 256,
        }
    }
}

/// Equalize, blur, min-max normalize and resize a raw intensity grid.
///
/// Equalized intensities are quantized to `equalize_bins` levels, which makes
/// the operation idempotent (blur disabled) on an already-sized image.
pub fn preprocess_image(raw: ArrayView2<'_, f64>, opts: &PreprocessOptions) -> Result<ImageTensor> {
    if raw.is_empty() {
        return Err(invalid_input("empty image"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(invalid_input("image contains non-finite intensities"));
    }
    if opts.side == 0 {
        return Err(invalid_config("preprocess side must be positive"));
    }
    if opts.equalize_bins < 2 {
        return Err(invalid_config("equalization needs at least 2 bins"));
    }
    let mut img = raw.to_owned();
    min_max_normalize(&mut img);
    let mut img = equalize_histogram(img.view(), opts.equalize_bins);
    if opts.blur {
        if opts.blur_kernel % 2 == 0 || opts.blur_sigma <= 0.0 {
            return Err(invalid_config("blur kernel must be odd and sigma positive"));
        }
        img = gaussian_blur(img.view(), opts.blur_sigma, opts.blur_kernel);
    }
    min_max_normalize(&mut img);
    Ok(ImageTensor(resize(img.view(), opts.side, opts.side)))
}

/// Scales values to `[0, 1]`; a constant grid becomes all zeros.
pub fn min_max_normalize(img: &mut Array2<f64>) {
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        img.fill(0.0);
        return;
    }
    img.mapv_inplace(|v| (v - lo) / range);
}

/// Histogram equalization of a `[0, 1]` grid onto `bins` evenly spaced levels.
pub fn equalize_histogram(img: ArrayView2<'_, f64>, bins: usize) -> Array2<f64> {
    let bin_of = |v: f64| ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    let mut hist = vec![0u64; bins];
    for &v in img.iter() {
        hist[bin_of(v)] += 1;
    }
    let total: u64 = hist.iter().sum();
    let mut cdf = vec![0u64; bins];
    let mut running = 0;
    for (c, h) in cdf.iter_mut().zip(&hist) {
        running += h;
        *c = running;
    }
    let cdf_min = hist
        .iter()
        .zip(&cdf)
        .find(|(h, _)| **h > 0)
        .map(|(_, c)| *c)
        .unwrap_or(0);
    if total == cdf_min {
        return Array2::zeros(img.raw_dim());
    }
    let levels = (bins - 1) as f64;
    let denom = (total - cdf_min) as f64;
    let lut: Vec<f64> = cdf
        .iter()
        .map(|&c| ((c.saturating_sub(cdf_min)) as f64 / denom * levels).round() / levels)
        .collect();
    img.mapv(|v| lut[bin_of(v)])
}

fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur with reflect-101 borders.
pub fn gaussian_blur(img: ArrayView2<'_, f64>, sigma: f64, kernel: usize) -> Array2<f64> {
    let half = (kernel / 2) as isize;
    let mut weights: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= norm);

    let (h, w) = img.dim();
    let mut tmp = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, wt) in weights.iter().enumerate() {
                let cc = reflect101(c as isize + k as isize - half, w);
                acc += wt * img[[r, cc]];
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, wt) in weights.iter().enumerate() {
                let rr = reflect101(r as isize + k as isize - half, h);
                acc += wt * tmp[[rr, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Per-axis resampling taps: bilinear when enlarging, area averaging when
/// shrinking.
fn axis_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    if dst >= src {
        (0..dst)
            .map(|i| {
                let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(src - 1);
                let f = x - x0 as f64;
                if x1 == x0 || f == 0.0 {
                    vec![(x0, 1.0)]
                } else {
                    vec![(x0, 1.0 - f), (x1, f)]
                }
            })
            .collect()
    } else {
        (0..dst)
            .map(|i| {
                let lo = i as f64 * scale;
                let hi = lo + scale;
                let mut taps = Vec::new();
                let mut j = lo.floor() as usize;
                while (j as f64) < hi && j < src {
                    let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((j, overlap / scale));
                    }
                    j += 1;
                }
                taps
            })
            .collect()
    }
}

/// Resamples a grid to `height`×`width`. Same-size input is returned unchanged.
pub fn resize(img: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    if (h, w) == (height, width) {
        return img.to_owned();
    }
    let row_taps = axis_taps(h, height);
    let col_taps = axis_taps(w, width);
    let mut tmp = Array2::<f64>::zeros((h, width));
    for r in 0..h {
        for (c, taps) in col_taps.iter().enumerate() {
            tmp[[r, c]] = taps.iter().map(|&(j, wt)| wt * img[[r, j]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((height, width));
    for (r, taps) in row_taps.iter().enumerate() {
        for c in 0..width {
            out[[r, c]] = taps.iter().map(|&(j, wt)| wt * tmp[[j, c]]).sum();
        }
    }
    out
}

/// Bilinear sample with zero outside the grid.
fn sample_zero_pad(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let get = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            0.0
        } else {
            img[[r as usize, c as usize]]
        }
    };
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        if wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            if wx == 0.0 {
                continue;
            }
            acc += wy * wx * get(y0 + dy, x0 + dx);
        }
    }
    acc
}

/// Bilinear sample clamped to the grid edge.
fn sample_clamped(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub flip_enabled: bool,
    pub max_rotation_deg: f64,
    pub max_translation_frac: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            enabled: true,
            flip_enabled: true,
            max_rotation_deg: 10.0,
            max_translation_frac: 0.05,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_deg >= 0.0) || !self.max_rotation_deg.is_finite() {
            return Err(invalid_config("max_rotation_deg must be finite and >= 0"));
        }
        if !(0.0..=0.5).contains(&self.max_translation_frac) {
            return Err(invalid_config("max_translation_frac must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// Transform parameters drawn for one augmentation call.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentParams {
    pub flip: bool,
    pub rotation_deg: f64,
    /// Translation in pixels along x (columns) and y (rows).
    pub shift_x: f64,
    pub shift_y: f64,
}

impl AugmentParams {
    pub fn sample<R: Rng + ?Sized>(policy: &AugmentPolicy, side: usize, rng: &mut R) -> Self {
        if !policy.enabled {
            return AugmentParams::default();
        }
        let flip = policy.flip_enabled && rng.random_bool(0.5);
        let rotation_deg = if policy.max_rotation_deg > 0.0 {
            rng.random_range(-policy.max_rotation_deg..=policy.max_rotation_deg)
        } else {
            0.0
        };
        let max_shift = policy.max_translation_frac * side as f64;
        let (shift_x, shift_y) = if max_shift > 0.0 {
            (
                rng.random_range(-max_shift..=max_shift),
                rng.random_range(-max_shift..=max_shift),
            )
        } else {
            (0.0, 0.0)
        };
        AugmentParams {
            flip,
            rotation_deg,
            shift_x,
            shift_y,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.rotation_deg == 0.0 && self.shift_x == 0.0 && self.shift_y == 0.0
    }

    /// Applies flip, then rotation about the center, then translation.
    /// Pixels mapped from outside the frame are 0.
    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        if self.is_identity() {
            return img.clone();
        }
        let (h, w) = img.0.dim();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let out = Array2::from_shape_fn((h, w), |(r, c)| {
            let y = r as f64 - self.shift_y - cy;
            let x = c as f64 - self.shift_x - cx;
            // inverse rotation
            let sy = cos * y - sin * x + cy;
            let mut sx = sin * y + cos * x + cx;
            if self.flip {
                sx = w as f64 - 1.0 - sx;
            }
            sample_zero_pad(&img.0, sy, sx)
        });
        ImageTensor(out)
    }
}

/// Random flip, rotation and translation within `policy`; the disabled policy
/// returns the input unchanged.
pub fn weak_augment<R: Rng + ?Sized>(
    img: &ImageTensor,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> (ImageTensor, AugmentParams) {
    let side = img.height().max(img.width());
    let params = AugmentParams::sample(policy, side, rng);
    (params.apply(img), params)
}

/// Square crop window in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub top: f64,
    pub left: f64,
    pub size: f64,
    /// Crop area divided by source area.
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiCropOptions {
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    /// Output side of global crops; 0 means the source side.
    pub global_side: usize,
    /// Output side of local crops; 0 means half the source side.
    pub local_side: usize,
}

impl Default for MultiCropOptions {
    fn default() -> Self {
        MultiCropOptions {
            global_scale: (0.75, 1.0),
            local_scale: (0.2, 0.6),
            global_side: 0,
            local_side: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CropSet {
    pub globals: Vec<ImageTensor>,
    pub locals: Vec<ImageTensor>,
    pub global_rects: Vec<CropRect>,
    pub local_rects: Vec<CropRect>,
}

impl CropSet {
    pub fn scales(&self) -> impl Iterator<Item = f64> + '_ {
        self.global_rects
            .iter()
            .chain(&self.local_rects)
            .map(|r| r.scale)
    }
}

fn sample_rect<R: Rng + ?Sized>(side: usize, range: (f64, f64), rng: &mut R) -> CropRect {
    let (lo, hi) = range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let size = scale.sqrt() * side as f64;
    let slack = (side as f64 - size).max(0.0);
    let top = if slack > 0.0 { rng.random_range(0.0..=slack) } else { 0.0 };
    let left = if slack > 0.0 { rng.random_range(0.0..=slack) } else { 0.0 };
    let realized = (size / side as f64).powi(2);
    CropRect {
        top,
        left,
        size,
        scale: realized,
    }
}

/// Resamples the square window `rect` of `img` to `out`×`out`.
pub fn crop_resize(img: &ImageTensor, rect: &CropRect, out: usize) -> ImageTensor {
    let step = rect.size / out as f64;
    ImageTensor(Array2::from_shape_fn((out, out), |(r, c)| {
        let y = rect.top + (r as f64 + 0.5) * step - 0.5;
        let x = rect.left + (c as f64 + 0.5) * step - 0.5;
        sample_clamped(&img.0, y, x)
    }))
}

/// Draws `globals` large and `locals` small square crops of a square image.
pub fn multi_crop<R: Rng + ?Sized>(
    img: &ImageTensor,
    globals: usize,
    locals: usize,
    opts: &MultiCropOptions,
    rng: &mut R,
) -> Result<CropSet> {
    if globals == 0 {
        return Err(invalid_input("multi-crop needs at least one global crop"));
    }
    let side = img
        .side()
        .ok_or_else(|| invalid_input("multi-crop expects a square image"))?;
    let check = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi <= 1.0;
    if !check(opts.global_scale) || !check(opts.local_scale) {
        return Err(invalid_config("crop scale ranges must satisfy 0 < lo <= hi <= 1"));
    }
    let global_side = if opts.global_side == 0 { side } else { opts.global_side };
    let local_side = if opts.local_side == 0 { (side / 2).max(1) } else { opts.local_side };

    let global_rects: Vec<CropRect> = (0..globals)
        .map(|_| sample_rect(side, opts.global_scale, rng))
        .collect();
    let local_rects: Vec<CropRect> = (0..locals)
        .map(|_| sample_rect(side, opts.local_scale, rng))
        .collect();
    Ok(CropSet {
        globals: global_rects
            .iter()
            .map(|r| crop_resize(img, r, global_side))
            .collect(),
        locals: local_rects
            .iter()
            .map(|r| crop_resize(img, r, local_side))
            .collect(),
        global_rects,
        local_rects,
    })
}
