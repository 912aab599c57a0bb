use ndarray::Array2;

use crate::error::{invalid_config, invalid_input, Result};

/// Boolean grid at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(pub Array2<bool>);

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask(Array2::from_elem((height, width), false))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    /// `map ≥ threshold`, nearest-upsampled to `height`×`width`.
    pub fn from_threshold(map: &Array2<f64>, threshold: f64, height: usize, width: usize) -> Self {
        let (mh, mw) = map.dim();
        BinaryMask(Array2::from_shape_fn((height, width), |(r, c)| {
            map[[r * mh / height, c * mw / width]] >= threshold
        }))
    }
}

/// `2|a∩b| / (|a|+|b|)`, with two empty masks scoring 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid_input(format!(
            "mask dimensions differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.0.iter().zip(b.0.iter()) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub masks: Vec<BinaryMask>,
    pub dice: Vec<f64>,
    pub best_head: Option<usize>,
    pub best_dice: Option<f64>,
}

/// Thresholds each per-head map (values in `[0, 1]`) into a mask at the
/// output resolution; with a reference mask, picks the head of highest dice.
pub fn localize(
    maps: &[Array2<f64>],
    threshold: f64,
    height: usize,
    width: usize,
    reference: Option<&BinaryMask>,
) -> Result<Localization> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(invalid_config(format!("threshold {threshold} outside [0, 1]")));
    }
    let masks: Vec<BinaryMask> = maps
        .iter()
        .map(|m| BinaryMask::from_threshold(m, threshold, height, width))
        .collect();
    let mut out = Localization {
        masks,
        dice: Vec::new(),
        best_head: None,
        best_dice: None,
    };
    if let Some(reference) = reference {
        out.dice = out.masks.iter().map(|m| dice(m, reference)).collect::<Result<_>>()?;
        for (i, &d) in out.dice.iter().enumerate() {
            if out.best_dice.is_none_or(|b| d > b) {
                out.best_head = Some(i);
                out.best_dice = Some(d);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(cells: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(4, 4);
        for &c in cells {
            m.0[c] = true;
        }
        m
    }

    #[test]
    fn dice_cases() {
        let a = mask(&[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask(&[(3, 3), (2, 2)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let c = mask(&[(0, 0), (0, 1), (3, 3), (2, 3)]);
        assert_eq!(dice(&a, &c).unwrap(), 0.5);
        assert_eq!(dice(&mask(&[]), &mask(&[])).unwrap(), 1.0);
        assert!(dice(&a, &BinaryMask::empty(3, 4)).is_err());
    }

    #[test]
    fn threshold_boundaries() {
        let map = Array2::from_shape_fn((2, 2), |(r, c)| (r * 2 + c) as f64 / 3.0);
        let full = localize(&[map.clone()], 0.0, 4, 4, None).unwrap();
        assert_eq!(full.masks[0].count(), 16);
        let none = localize(&[map.clone()], 1.0, 4, 4, None).unwrap();
        assert_eq!(none.masks[0].count(), 4);
        let zero = Array2::zeros((2, 2));
        let empty = localize(&[zero], 0.1, 4, 4, None).unwrap();
        assert_eq!(empty.masks[0].count(), 0);
        assert!(localize(&[map], 1.2, 4, 4, None).is_err());
    }

    #[test]
    fn blob_dice_matches_pixel_count() {
        let mut map = Array2::zeros((8, 8));
        for r in 2..5 {
            for c in 2..5 {
                map[[r, c]] = 1.0;
            }
        }
        let mut truth = BinaryMask::empty(8, 8);
        for r in 3..6 {
            for c in 3..6 {
                truth.0[[r, c]] = true;
            }
        }
        let loc = localize(&[Array2::zeros((8, 8)), map], 0.1, 8, 8, Some(&truth)).unwrap();
        // 4 shared pixels, 9 + 9 total
        assert_eq!(loc.best_head, Some(1));
        assert_eq!(loc.best_dice, Some(8.0 / 18.0));
    }
}
