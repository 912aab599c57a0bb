use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SampleRecord, Split};
use crate::error::{invalid_config, Result};
use crate::eval::BinaryMask;
use crate::par::{self, Execution};

/// Acquisition differences of one external site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteShift {
    pub name: String,
    pub noise_scale: f64,
    pub gamma: f64,
    pub contrast: f64,
}

impl SiteShift {
    pub fn identity(name: &str) -> Self {
        SiteShift {
            name: name.into(),
            noise_scale: 1.0,
            gamma: 1.0,
            contrast: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub external_per_class: usize,
    pub side: usize,
    /// 0 gives a flat noiseless background; 1 a busy, noisy one.
    pub difficulty: f64,
    pub lesion_amplitude: f64,
    pub external_sites: Vec<SiteShift>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 2,
            train_per_class: 1000,
            val_per_class: 100,
            external_per_class: 150,
            side: 32,
            difficulty: 0.5,
            lesion_amplitude: 0.35,
            external_sites: vec![
                SiteShift {
                    name: "site_a".into(),
                    noise_scale: 1.6,
                    gamma: 1.0,
                    contrast: 1.0,
                },
                SiteShift {
                    name: "site_b".into(),
                    noise_scale: 1.0,
                    gamma: 0.6,
                    contrast: 0.85,
                },
                SiteShift {
                    name: "site_c".into(),
                    noise_scale: 1.3,
                    gamma: 1.4,
                    contrast: 0.75,
                },
            ],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid_config("synthetic data needs at least two classes"));
        }
        if self.side < 8 {
            return Err(invalid_config("synthetic side must be at least 8"));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(invalid_config("difficulty must lie in [0, 1]"));
        }
        if self.external_per_class > 0 && self.external_sites.is_empty() {
            return Err(invalid_config("external samples requested without sites"));
        }
        Ok(())
    }
}

/// Raw images, lesion masks and manifest rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub records: Vec<SampleRecord>,
    pub images: HashMap<String, Array2<f64>>,
    pub masks: HashMap<String, BinaryMask>,
    pub class_names: Vec<String>,
}

const SHAPES: [&str; 4] = ["blob", "ring", "square", "cross"];

pub fn class_name(c: usize) -> String {
    if c == 0 {
        "normal".into()
    } else {
        let shape = SHAPES[(c - 1) % SHAPES.len()];
        match (c - 1) / SHAPES.len() {
            0 => shape.to_string(),
            k => format!("{shape}{}", k + 1),
        }
    }
}

/// Soft membership of pixel (r, c) in lesion `kind` centred at (cy, cx).
fn pattern_weight(kind: usize, r: f64, c: f64, cy: f64, cx: f64, radius: f64) -> f64 {
    let (dy, dx) = (r - cy, c - cx);
    let edge = |d: f64| (d + 0.5).clamp(0.0, 1.0);
    match kind % SHAPES.len() {
        0 => edge(radius - (dy * dy + dx * dx).sqrt()),
        1 => {
            let thick = (radius / 3.0).max(1.0);
            edge(thick - ((dy * dy + dx * dx).sqrt() - radius * 0.75).abs())
        }
        2 => edge(radius * 0.85 - dy.abs().max(dx.abs())),
        _ => {
            let arm = (radius / 3.5).max(0.75);
            let bar = |a: f64, b: f64| edge(arm - a.abs()).min(edge(radius - b.abs()));
            bar(dy, dx).max(bar(dx, dy))
        }
    }
}

struct Job {
    id: String,
    kinds: Vec<usize>,
    shift: SiteShift,
    seed: u64,
}

struct Generated {
    image: Array2<f64>,
    mask: BinaryMask,
}

fn render(job: &Job, side: usize, difficulty: f64, amplitude: f64) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let n = side as f64;
    let mut img = Array2::from_elem((side, side), 0.4);

    // low-frequency background structure
    let bg_amp = 0.25 * difficulty;
    for _ in 0..3 {
        let freq = rng.random_range(0.5..2.0) * std::f64::consts::TAU / n;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let weight = bg_amp * rng.random_range(0.3..1.0) / 3.0;
        let (sy, sx) = (angle.sin(), angle.cos());
        for ((r, c), v) in img.indexed_iter_mut() {
            *v += weight * (freq * (r as f64 * sy + c as f64 * sx) + phase).sin();
        }
    }

    let mut mask = BinaryMask::empty(side, side);
    for &kind in &job.kinds {
        let radius = rng.random_range(0.09..0.15) * n;
        let margin = radius + 1.0;
        let cy = rng.random_range(margin..n - margin);
        let cx = rng.random_range(margin..n - margin);
        let amp = amplitude * job.shift.contrast * rng.random_range(0.85..1.15);
        for ((r, c), v) in img.indexed_iter_mut() {
            let w = pattern_weight(kind, r as f64 + 0.5, c as f64 + 0.5, cy, cx, radius);
            if w > 0.0 {
                *v += amp * w;
            }
            if w >= 0.5 {
                mask.0[[r, c]] = true;
            }
        }
    }

    let sd = 0.08 * difficulty * job.shift.noise_scale;
    if sd > 0.0 {
        let noise = Normal::new(0.0, sd).expect("positive sd");
        img.mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    let gamma = job.shift.gamma;
    img.mapv_inplace(|v| v.clamp(0.0, 1.0).powf(gamma));
    Generated { image: img, mask }
}

fn render_all(jobs: &[Job], spec: &SynthSpec, exec: Execution) -> Vec<Generated> {
    par::map(exec, jobs, |j| render(j, spec.side, spec.difficulty, spec.lesion_amplitude))
}

/// Single-label dataset. Class 0 is lesion-free; class `c ≥ 1` carries one
/// lesion of its own shape. External records get a site's covariate shift.
pub fn synth_dataset<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R, exec: Execution) -> Result<SynthDataset> {
    spec.validate()?;
    let class_names: Vec<String> = (0..spec.num_classes).map(class_name).collect();
    let internal = SiteShift::identity("internal");
    let mut records = Vec::new();
    let mut jobs = Vec::new();
    let splits = [
        (Split::Train, "train", spec.train_per_class),
        (Split::InternalVal, "val", spec.val_per_class),
        (Split::ExternalTest, "ext", spec.external_per_class),
    ];
    for (split, tag, per_class) in splits {
        for i in 0..per_class {
            for c in 0..spec.num_classes {
                let shift = if split == Split::ExternalTest {
                    spec.external_sites[(i * spec.num_classes + c) % spec.external_sites.len()].clone()
                } else {
                    internal.clone()
                };
                let id = format!("{tag}_c{c}_{i:05}");
                let mut rec = SampleRecord::new(id.clone(), Some(c), split);
                rec.class_name = Some(class_names[c].clone());
                rec.site = Some(shift.name.clone());
                records.push(rec);
                jobs.push(Job {
                    id,
                    kinds: if c == 0 { vec![] } else { vec![c - 1] },
                    shift,
                    seed: rng.next_u64(),
                });
            }
        }
    }
    let generated = render_all(&jobs, spec, exec);
    let mut images = HashMap::with_capacity(jobs.len());
    let mut masks = HashMap::with_capacity(jobs.len());
    for (job, g) in jobs.into_iter().zip(generated) {
        images.insert(job.id.clone(), g.image);
        masks.insert(job.id, g.mask);
    }
    Ok(SynthDataset {
        records,
        images,
        masks,
        class_names,
    })
}

/// Multi-label set of `n` images over `k` finding types, each present
/// independently with probability ½. Returns `(id, targets)` pairs and images.
#[allow(clippy::type_complexity)]
pub fn synth_multilabel<R: Rng + ?Sized>(
    k: usize,
    n: usize,
    spec: &SynthSpec,
    rng: &mut R,
    exec: Execution,
) -> Result<(Vec<(String, Vec<bool>)>, HashMap<String, Array2<f64>>)> {
    spec.validate()?;
    if k == 0 {
        return Err(invalid_config("multi-label data needs at least one class"));
    }
    let mut samples = Vec::with_capacity(n);
    let mut jobs = Vec::with_capacity(n);
    for i in 0..n {
        let targets: Vec<bool> = (0..k).map(|_| rng.random_bool(0.5)).collect();
        let id = format!("pre_{i:05}");
        jobs.push(Job {
            id: id.clone(),
            kinds: (0..k).filter(|&j| targets[j]).collect(),
            shift: SiteShift::identity("pretrain"),
            seed: rng.next_u64(),
        });
        samples.push((id, targets));
    }
    let images = jobs
        .iter()
        .map(|j| j.id.clone())
        .zip(render_all(&jobs, spec, exec).into_iter().map(|g| g.image))
        .collect();
    Ok((samples, images))
}
