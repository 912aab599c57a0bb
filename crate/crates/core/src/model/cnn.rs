//! Two-layer convolutional classifier used only as the GradCAM comparator.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, DistlError, Result};
use crate::model::layers::{log_softmax, softmax};
use crate::optim::{AdamConfig, AdamState};
use crate::par::{self, Execution};
use crate::pipeline::{resize, weak_augment, AugmentPolicy, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnSpec {
    pub input_side: usize,
    pub channels1: usize,
    pub channels2: usize,
    pub num_classes: usize,
}

impl Default for CnnSpec {
    fn default() -> Self {
        CnnSpec {
            input_side: 32,
            channels1: 8,
            channels2: 16,
            num_classes: 2,
        }
    }
}

impl CnnSpec {
    fn validate(&self) -> Result<()> {
        if self.input_side < 2 || self.input_side % 2 != 0 {
            return Err(DistlError::InvalidSpec("CNN input side must be even".into()));
        }
        if self.channels1 == 0 || self.channels2 == 0 || self.num_classes == 0 {
            return Err(DistlError::InvalidSpec("CNN widths must be positive".into()));
        }
        Ok(())
    }

    fn sizes(&self) -> [usize; 6] {
        let (c1, c2, k) = (self.channels1, self.channels2, self.num_classes);
        [c1 * 9, c1, c2 * c1 * 9, c2, c2 * k, k]
    }
}

/// CNN parameters plus the number of supervised updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnAdapter {
    pub spec: CnnSpec,
    pub data: Vec<f64>,
    pub trained_steps: u64,
}

struct CnnCache {
    cols1: Array2<f64>,
    z1: Array2<f64>,
    cols2: Array2<f64>,
    z2: Array2<f64>,
    /// Last feature maps, `(h·w) × c2`.
    feats: Array2<f64>,
    gap: Array1<f64>,
}

/// 3×3 zero-padded im2col of a `(h·w) × c` channel-last map.
fn im2col(x: ArrayView2<f64>, side: usize) -> Array2<f64> {
    let c = x.ncols();
    Array2::from_shape_fn((side * side, c * 9), |(p, j)| {
        let (ch, k) = (j / 9, j % 9);
        let r = (p / side) as isize + (k / 3) as isize - 1;
        let q = (p % side) as isize + (k % 3) as isize - 1;
        if r < 0 || q < 0 || r >= side as isize || q >= side as isize {
            0.0
        } else {
            x[[r as usize * side + q as usize, ch]]
        }
    })
}

fn col2im(dcols: &Array2<f64>, side: usize, channels: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((side * side, channels));
    for p in 0..side * side {
        for j in 0..channels * 9 {
            let (ch, k) = (j / 9, j % 9);
            let r = (p / side) as isize + (k / 3) as isize - 1;
            let q = (p % side) as isize + (k % 3) as isize - 1;
            if r >= 0 && q >= 0 && r < side as isize && q < side as isize {
                dx[[r as usize * side + q as usize, ch]] += dcols[[p, j]];
            }
        }
    }
    dx
}

fn fill<'a>(dst: &mut [f64], src: impl Iterator<Item = &'a f64>) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *s);
}

impl CnnAdapter {
    pub fn new<R: Rng + ?Sized>(spec: CnnSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let sizes = spec.sizes();
        let fan_in = [9, 0, spec.channels1 * 9, 0, spec.channels2, 0];
        let mut data = Vec::with_capacity(sizes.iter().sum());
        for (len, fan) in sizes.into_iter().zip(fan_in) {
            if fan == 0 {
                data.extend(std::iter::repeat_n(0.0, len));
            } else {
                let bound = (6.0 / fan as f64).sqrt();
                data.extend((0..len).map(|_| rng.random_range(-bound..bound)));
            }
        }
        Ok(CnnAdapter {
            spec,
            data,
            trained_steps: 0,
        })
    }

    fn offsets(&self) -> [std::ops::Range<usize>; 6] {
        let sizes = self.spec.sizes();
        let mut start = 0;
        sizes.map(|len| {
            let r = start..start + len;
            start += len;
            r
        })
    }

    fn mats(&self) -> (ArrayView2<'_, f64>, &[f64], ArrayView2<'_, f64>, &[f64], ArrayView2<'_, f64>, &[f64]) {
        let [w1, b1, w2, b2, wf, bf] = self.offsets();
        let (c1, c2, k) = (self.spec.channels1, self.spec.channels2, self.spec.num_classes);
        (
            ArrayView2::from_shape((c1, 9), &self.data[w1]).unwrap(),
            &self.data[b1],
            ArrayView2::from_shape((c2, c1 * 9), &self.data[w2]).unwrap(),
            &self.data[b2],
            ArrayView2::from_shape((c2, k), &self.data[wf]).unwrap(),
            &self.data[bf],
        )
    }

    fn forward_cached(&self, img: &ImageTensor) -> Result<(Array1<f64>, CnnCache)> {
        let side = self.spec.input_side;
        if img.side() != Some(side) {
            return Err(invalid_input(format!("CNN adapter expects {side}x{side} input")));
        }
        let (w1, b1, w2, b2, wf, bf) = self.mats();
        let x = img.0.clone().into_shape_with_order((side * side, 1)).unwrap();
        let cols1 = im2col(x.view(), side);
        let mut z1 = cols1.dot(&w1.t());
        z1 += &ArrayView2::from_shape((1, b1.len()), b1).unwrap();
        let a1 = z1.mapv(|v| v.max(0.0));
        let half = side / 2;
        let c1 = self.spec.channels1;
        let pooled = Array2::from_shape_fn((half * half, c1), |(p, ch)| {
            let (r, q) = (2 * (p / half), 2 * (p % half));
            0.25 * (a1[[r * side + q, ch]]
                + a1[[r * side + q + 1, ch]]
                + a1[[(r + 1) * side + q, ch]]
                + a1[[(r + 1) * side + q + 1, ch]])
        });
        let cols2 = im2col(pooled.view(), half);
        let mut z2 = cols2.dot(&w2.t());
        z2 += &ArrayView2::from_shape((1, b2.len()), b2).unwrap();
        let feats = z2.mapv(|v| v.max(0.0));
        let gap = feats.mean_axis(Axis(0)).unwrap();
        let logits = gap.dot(&wf) + &Array1::from(bf.to_vec());
        Ok((
            logits,
            CnnCache {
                cols1,
                z1,
                cols2,
                z2,
                feats,
                gap,
            },
        ))
    }

    pub fn logits(&self, img: &ImageTensor) -> Result<Array1<f64>> {
        self.forward_cached(img).map(|(l, _)| l)
    }

    /// Gradient of a loss with upstream `dlogits`; also returns `dL/dfeats`.
    fn backward(&self, c: &CnnCache, dlogits: &Array1<f64>) -> (Vec<f64>, Array2<f64>) {
        let side = self.spec.input_side;
        let half = side / 2;
        let (c1, c2) = (self.spec.channels1, self.spec.channels2);
        let (_, _, w2, _, wf, _) = self.mats();
        let [r_w1, r_b1, r_w2, r_b2, r_wf, r_bf] = self.offsets();
        let mut grad = vec![0.0; self.data.len()];

        let dwf = c.gap.view().insert_axis(Axis(1)).dot(&dlogits.view().insert_axis(Axis(0)));
        fill(&mut grad[r_wf], dwf.iter());
        fill(&mut grad[r_bf], dlogits.iter());
        let dgap = wf.dot(dlogits);
        let hw = (half * half) as f64;
        let dfeats = Array2::from_shape_fn((half * half, c2), |(_, ch)| dgap[ch] / hw);
        let mut dz2 = dfeats.clone();
        dz2.zip_mut_with(&c.z2, |d, &z| {
            if z <= 0.0 {
                *d = 0.0
            }
        });
        let dw2 = dz2.t().dot(&c.cols2);
        fill(&mut grad[r_w2], dw2.iter());
        let db2 = dz2.sum_axis(Axis(0));
        fill(&mut grad[r_b2], db2.iter());
        let dcols2 = dz2.dot(&w2);
        let dpooled = col2im(&dcols2, half, c1);
        let mut dz1 = Array2::from_shape_fn((side * side, c1), |(p, ch)| {
            let (r, q) = (p / side, p % side);
            0.25 * dpooled[[(r / 2) * half + q / 2, ch]]
        });
        dz1.zip_mut_with(&c.z1, |d, &z| {
            if z <= 0.0 {
                *d = 0.0
            }
        });
        let dw1 = dz1.t().dot(&c.cols1);
        fill(&mut grad[r_w1], dw1.iter());
        let db1 = dz1.sum_axis(Axis(0));
        fill(&mut grad[r_b1], db1.iter());
        (grad, dfeats)
    }

    /// Supervised cross-entropy training with weak augmentation.
    #[allow(clippy::too_many_arguments)]
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        images: &[&ImageTensor],
        labels: &[usize],
        epochs: usize,
        batch_size: usize,
        lr: f64,
        policy: &AugmentPolicy,
        rng: &mut R,
        exec: Execution,
    ) -> Result<Vec<f64>> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(invalid_input("CNN training needs matching nonempty images and labels"));
        }
        if labels.iter().any(|&l| l >= self.spec.num_classes) {
            return Err(invalid_input("label outside the CNN class set"));
        }
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamState::new(self.data.len());
        let mut epoch_losses = Vec::with_capacity(epochs);
        let mut order: Vec<usize> = (0..images.len()).collect();
        for _ in 0..epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch_size.max(1)) {
                let views: Vec<(ImageTensor, usize)> = chunk
                    .iter()
                    .map(|&i| (weak_augment(images[i], policy, rng).0, labels[i]))
                    .collect();
                let parts = par::map(exec, &views, |(img, y)| -> Result<(f64, Vec<f64>)> {
                    let (logits, cache) = self.forward_cached(img)?;
                    let lp = log_softmax(logits.view());
                    let mut dl = softmax(logits.view());
                    dl[*y] -= 1.0;
                    Ok((-lp[*y], self.backward(&cache, &dl).0))
                });
                let mut grad = vec![0.0; self.data.len()];
                let n = views.len() as f64;
                for part in parts {
                    let (loss, g) = part?;
                    total += loss;
                    grad.iter_mut().zip(g).for_each(|(a, b)| *a += b / n);
                }
                opt.update(&cfg, lr, &mut self.data, &grad, None);
                self.trained_steps += 1;
            }
            epoch_losses.push(total / images.len() as f64);
        }
        Ok(epoch_losses)
    }
}

/// GradCAM heatmap and whether the adapter had been trained.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCam {
    pub heatmap: Array2<f64>,
    pub untrained: bool,
}

/// Combines feature maps (`k × h × w`) with their output gradients: channel
/// weights are spatially averaged gradients; the rectified sum is min-max
/// normalized and resized to `out_side`.
pub fn gradcam_from_parts(features: &Array3<f64>, grads: &Array3<f64>, out_side: usize) -> Array2<f64> {
    let (k, h, w) = features.dim();
    let mut cam = Array2::zeros((h, w));
    for ch in 0..k {
        let alpha = grads.slice(s![ch, .., ..]).mean().unwrap_or(0.0);
        if alpha != 0.0 {
            cam.scaled_add(alpha, &features.slice(s![ch, .., ..]));
        }
    }
    cam.mapv_inplace(|v| v.max(0.0));
    crate::pipeline::min_max_normalize(&mut cam);
    resize(cam.view(), out_side, out_side)
}

/// GradCAM for `target_class` on the adapter's last convolutional layer.
pub fn gradcam(cnn: &CnnAdapter, img: &ImageTensor, target_class: usize) -> Result<GradCam> {
    if target_class >= cnn.spec.num_classes {
        return Err(invalid_input("target class out of range"));
    }
    let (_, cache) = cnn.forward_cached(img)?;
    let mut onehot = Array1::zeros(cnn.spec.num_classes);
    onehot[target_class] = 1.0;
    let (_, dfeats) = cnn.backward(&cache, &onehot);
    let half = cnn.spec.input_side / 2;
    let to_maps = |m: &Array2<f64>| {
        let c = m.ncols();
        Array3::from_shape_fn((c, half, half), |(ch, r, q)| m[[r * half + q, ch]])
    };
    Ok(GradCam {
        heatmap: gradcam_from_parts(&to_maps(&cache.feats), &to_maps(&dfeats), cnn.spec.input_side),
        untrained: cnn.trained_steps == 0,
    })
}
