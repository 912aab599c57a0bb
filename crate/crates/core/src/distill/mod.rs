//! Teacher-student training: supervised (pre)training, the combined
//! self-supervised and self-training loss, EMA co-distillation, labeled
//! correction and the generation loop.

mod checkpoint;
mod loss;

pub use checkpoint::CHECKPOINT_VERSION;
pub use loss::{
    bce_with_logits, cross_entropy, selftrain_loss, selftrain_loss_grad, ssl_loss, ssl_loss_grad,
    teacher_distributions,
};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, DistlError, Result};
use crate::model::{build_model, softmax, ModelParams, ModelSpec};
use crate::optim::{momentum_cosine, step_decay, warmup_cosine, AdamConfig, AdamState};
use crate::par::{self, Execution};
use crate::pipeline::{multi_crop, weak_augment, AugmentPolicy, ImageTensor, MultiCropOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    /// Base EMA momentum, cosine-annealed to 1 over a generation.
    pub ema_momentum: f64,
    pub anneal_momentum: bool,
    pub teacher_temp: f64,
    pub student_temp: f64,
    /// Student temperature inside the self-training term.
    pub selftrain_temp: f64,
    pub center_momentum: f64,
    pub ssl_weight: f64,
    pub correction_interval: u64,
    pub correction_steps: usize,
    pub global_crops: usize,
    pub local_crops: usize,
    pub crops: MultiCropOptions,
    pub augment: AugmentPolicy,
    pub adam: AdamConfig,
    pub execution: Execution,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 5,
            warmup_epochs: 1,
            batch_size: 16,
            max_lr: 5e-5,
            ema_momentum: 0.996,
            anneal_momentum: true,
            teacher_temp: 0.04,
            student_temp: 0.1,
            selftrain_temp: 1.0,
            center_momentum: 0.9,
            ssl_weight: 1.0,
            correction_interval: 500,
            correction_steps: 50,
            global_crops: 2,
            local_crops: 4,
            crops: MultiCropOptions::default(),
            augment: AugmentPolicy::default(),
            adam: AdamConfig::default(),
            execution: Execution::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("teacher_temp", self.teacher_temp),
            ("student_temp", self.student_temp),
            ("selftrain_temp", self.selftrain_temp),
        ] {
            if !(t > 0.0) {
                return Err(invalid_config(format!("{name} must be positive")));
            }
        }
        for (name, m) in [
            ("ema_momentum", self.ema_momentum),
            ("center_momentum", self.center_momentum),
        ] {
            if !(0.0..=1.0).contains(&m) {
                return Err(invalid_config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.correction_interval == 0 {
            return Err(invalid_config("correction_interval must be at least 1"));
        }
        if self.batch_size == 0 || self.global_crops == 0 {
            return Err(invalid_config("batch_size and global_crops must be positive"));
        }
        if !(self.max_lr >= 0.0) || !(self.ssl_weight >= 0.0) {
            return Err(invalid_config("max_lr and ssl_weight must be non-negative"));
        }
        self.augment.validate()
    }
}

/// Plain supervised training (initial model, comparator, pretraining).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied every `lr_step_epochs` epochs.
    pub lr_gamma: f64,
    pub lr_step_epochs: usize,
    pub augment: AugmentPolicy,
    pub adam: AdamConfig,
    pub execution: Execution,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            epochs: 5,
            batch_size: 16,
            lr: 1e-4,
            lr_gamma: 0.5,
            lr_step_epochs: 2,
            augment: AugmentPolicy::default(),
            adam: AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            execution: Execution::default(),
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid_config("batch_size must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.lr_gamma > 0.0) {
            return Err(invalid_config("lr must be non-negative and lr_gamma positive"));
        }
        self.augment.validate()
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub center: Array1<f64>,
    pub optimizer: AdamState,
    pub generation: usize,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    /// Student and teacher start identical; center zero; fresh optimizer.
    pub fn new(student: ModelParams, rng: ChaCha8Rng) -> Self {
        Checkpoint {
            teacher: student.clone(),
            center: Array1::zeros(student.spec.proj_dim),
            optimizer: AdamState::new(student.param_count()),
            generation: 0,
            global_step: 0,
            rng,
            student,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.student.spec
    }
}

/// One structured log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub generation: usize,
    pub step: u64,
    pub ssl_loss: Option<f64>,
    pub selftrain_loss: Option<f64>,
    pub supervised_loss: Option<f64>,
    pub correction: bool,
    pub lr: f64,
    pub momentum: f64,
}

/// Clean teacher views and noised student views of one image.
#[derive(Debug, Clone)]
pub struct ImageViews {
    /// Un-augmented global crops.
    pub teacher: Vec<ImageTensor>,
    /// Augmented global crops (same order), then augmented local crops.
    pub student: Vec<ImageTensor>,
}

pub fn prepare_views(img: &ImageTensor, cfg: &DistillConfig, seed: u64) -> Result<ImageViews> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crops = multi_crop(img, cfg.global_crops, cfg.local_crops, &cfg.crops, &mut rng)?;
    let student = crops
        .globals
        .iter()
        .chain(&crops.locals)
        .map(|v| weak_augment(v, &cfg.augment, &mut rng).0)
        .collect();
    Ok(ImageViews {
        teacher: crops.globals,
        student,
    })
}

/// Teacher outputs on the clean views: class probabilities and projections.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    pub probs: Array2<f64>,
    pub proj: Array2<f64>,
}

pub fn teacher_targets(teacher: &ModelParams, views: &ImageViews) -> Result<TeacherTargets> {
    let g = views.teacher.len();
    let mut probs = Array2::zeros((g, teacher.spec.num_classes));
    let mut proj = Array2::zeros((g, teacher.spec.proj_dim));
    for (i, v) in views.teacher.iter().enumerate() {
        let out = teacher.infer(v)?;
        probs.row_mut(i).assign(&softmax(out.logits.view()));
        proj.row_mut(i).assign(&out.proj);
    }
    Ok(TeacherTargets { probs, proj })
}

/// `(ssl, selftrain)` losses of the student on one image's views. With
/// `grad`, accumulates the gradient of `selftrain + λ·ssl`.
pub fn image_objective(
    student: &ModelParams,
    views: &ImageViews,
    targets: &TeacherTargets,
    center: &Array1<f64>,
    cfg: &DistillConfig,
    grad: Option<&mut [f64]>,
) -> Result<(f64, f64)> {
    let v = views.student.len();
    let mut logits = Array2::zeros((v, student.spec.num_classes));
    let mut proj = Array2::zeros((v, student.spec.proj_dim));
    let mut caches = Vec::with_capacity(v);
    for (i, view) in views.student.iter().enumerate() {
        let (out, cache) = student.forward_view(view)?;
        logits.row_mut(i).assign(&out.logits);
        proj.row_mut(i).assign(&out.proj);
        caches.push(cache);
    }
    let (ssl, dproj) = ssl_loss_grad(
        targets.proj.view(),
        proj.view(),
        center.view(),
        cfg.teacher_temp,
        cfg.student_temp,
    )?;
    let (st, dlogits) = selftrain_loss_grad(targets.probs.view(), logits.view(), cfg.selftrain_temp)?;
    if let Some(grad) = grad {
        let dproj = dproj * cfg.ssl_weight;
        for (i, cache) in caches.iter().enumerate() {
            student.backward_view(cache, Some(dlogits.row(i)), Some(dproj.row(i)), grad);
        }
    }
    Ok((ssl, st))
}

/// `teacher ← m·teacher + (1−m)·student`.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, m: f64) {
    if m == 1.0 {
        return;
    }
    for (t, s) in teacher.data.iter_mut().zip(&student.data) {
        *t = m * *t + (1.0 - m) * s;
    }
}

fn check_finite(step: u64, what: &str, values: &[f64]) -> Result<()> {
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(DistlError::NonFiniteLoss {
            step,
            detail: format!("{what} = {bad}"),
        });
    }
    Ok(())
}

/// One DISTL update on a batch of preprocessed images. Never sees labels.
pub fn distl_step(ckpt: &mut Checkpoint, batch: &[&ImageTensor], cfg: &DistillConfig, lr: f64, m: f64) -> Result<LossRecord> {
    if batch.is_empty() {
        return Err(invalid_input("empty DISTL batch"));
    }
    let seeds: Vec<u64> = (0..batch.len()).map(|_| ckpt.rng.next_u64()).collect();
    let n_params = ckpt.student.param_count();
    let (student, teacher, center) = (&ckpt.student, &ckpt.teacher, &ckpt.center);
    let results = par::map_range(cfg.execution, batch.len(), |i| -> Result<_> {
        let views = prepare_views(batch[i], cfg, seeds[i])?;
        let targets = teacher_targets(teacher, &views)?;
        let mut grad = vec![0.0; n_params];
        let (ssl, st) = image_objective(student, &views, &targets, center, cfg, Some(&mut grad))?;
        Ok((ssl, st, grad, targets.proj))
    });
    let b = batch.len() as f64;
    let (mut ssl, mut st) = (0.0, 0.0);
    let mut grads = Vec::with_capacity(batch.len());
    let mut proj_sum = Array1::zeros(ckpt.center.len());
    let mut proj_rows = 0usize;
    for r in results {
        let (s1, s2, g, p) = r?;
        ssl += s1 / b;
        st += s2 / b;
        grads.push(g);
        proj_sum += &p.sum_axis(Axis(0));
        proj_rows += p.nrows();
    }
    let step = ckpt.global_step + 1;
    check_finite(step, "ssl_loss", &[ssl])?;
    check_finite(step, "selftrain_loss", &[st])?;
    let mut grad = par::sum_in_order(grads, n_params);
    grad.iter_mut().for_each(|g| *g /= b);
    check_finite(step, "gradient", &grad)?;

    let mask = ckpt.student.layout.decay_mask();
    ckpt.optimizer.update(&cfg.adam, lr, &mut ckpt.student.data, &grad, Some(&mask));
    ema_update(&mut ckpt.teacher, &ckpt.student, m);
    let mean = proj_sum / proj_rows as f64;
    let mu = cfg.center_momentum;
    ckpt.center.zip_mut_with(&mean, |c, &x| *c = mu * *c + (1.0 - mu) * x);
    ckpt.global_step = step;
    Ok(LossRecord {
        generation: ckpt.generation,
        step,
        ssl_loss: Some(ssl),
        selftrain_loss: Some(st),
        supervised_loss: None,
        correction: false,
        lr,
        momentum: m,
    })
}

/// Mean cross-entropy and summed gradient over a labeled batch; each image
/// gets a weak augmentation seeded by `seeds[i]`.
fn supervised_batch(
    params: &ModelParams,
    batch: &[(&ImageTensor, usize)],
    seeds: &[u64],
    policy: &AugmentPolicy,
    exec: Execution,
) -> Result<(f64, Vec<f64>)> {
    let n_params = params.param_count();
    let parts = par::map_range(exec, batch.len(), |i| -> Result<_> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        let (img, label) = batch[i];
        let (view, _) = weak_augment(img, policy, &mut rng);
        let (out, cache) = params.forward_view(&view)?;
        let (loss, dl) = cross_entropy(out.logits.view(), label)?;
        let mut grad = vec![0.0; n_params];
        params.backward_view(&cache, Some(dl.view()), None, &mut grad);
        Ok((loss, grad))
    });
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for p in parts {
        let (l, g) = p?;
        loss += l / b;
        grads.push(g);
    }
    let mut grad = par::sum_in_order(grads, n_params);
    grad.iter_mut().for_each(|g| *g /= b);
    Ok((loss, grad))
}

fn check_labels(labeled: &[(&ImageTensor, usize)], k: usize) -> Result<()> {
    match labeled.iter().find(|(_, l)| *l >= k) {
        Some((_, l)) => Err(invalid_input(format!("label {l} outside {k} classes"))),
        None => Ok(()),
    }
}

/// `C` supervised steps on the student from the labeled set, sharing the
/// DISTL optimizer state, with the teacher EMA after each. Returns the mean
/// loss (`None` when `C = 0`).
pub fn correction_update(
    ckpt: &mut Checkpoint,
    labeled: &[(&ImageTensor, usize)],
    cfg: &DistillConfig,
    lr: f64,
    m: f64,
) -> Result<Option<f64>> {
    if cfg.correction_steps == 0 {
        return Ok(None);
    }
    if labeled.is_empty() {
        return Err(invalid_config("correction needs a nonempty labeled set"));
    }
    check_labels(labeled, ckpt.student.spec.num_classes)?;
    let mask = ckpt.student.layout.decay_mask();
    let bs = cfg.batch_size.min(labeled.len());
    let mut total = 0.0;
    for _ in 0..cfg.correction_steps {
        let idx = rand::seq::index::sample(&mut ckpt.rng, labeled.len(), bs);
        let batch: Vec<(&ImageTensor, usize)> = idx.iter().map(|i| labeled[i]).collect();
        let seeds: Vec<u64> = (0..batch.len()).map(|_| ckpt.rng.next_u64()).collect();
        let (loss, grad) = supervised_batch(&ckpt.student, &batch, &seeds, &cfg.augment, cfg.execution)?;
        check_finite(ckpt.global_step, "correction loss", &[loss])?;
        ckpt.optimizer.update(&cfg.adam, lr, &mut ckpt.student.data, &grad, Some(&mask));
        ema_update(&mut ckpt.teacher, &ckpt.student, m);
        total += loss;
    }
    Ok(Some(total / cfg.correction_steps as f64))
}

/// Minibatch supervised training of `params` in place; returns the mean
/// training loss of each epoch.
pub fn train_supervised<R: Rng + ?Sized>(
    params: &mut ModelParams,
    labeled: &[(&ImageTensor, usize)],
    cfg: &SupervisedConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(invalid_input("supervised training needs labeled samples"));
    }
    check_labels(labeled, params.spec.num_classes)?;
    let mut opt = AdamState::new(params.param_count());
    let mask = params.layout.decay_mask();
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = step_decay(cfg.lr, cfg.lr_gamma, cfg.lr_step_epochs, epoch);
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&ImageTensor, usize)> = chunk.iter().map(|&i| labeled[i]).collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.next_u64()).collect();
            let (loss, grad) = supervised_batch(params, &batch, &seeds, &cfg.augment, cfg.execution)?;
            step += 1;
            check_finite(step, "supervised loss", &[loss])?;
            opt.update(&cfg.adam, lr, &mut params.data, &grad, Some(&mask));
            epoch_loss += loss * batch.len() as f64;
        }
        history.push(epoch_loss / labeled.len() as f64);
    }
    Ok(history)
}

/// Generation-0 model: supervised training from `init`, teacher copied from
/// the student. `rng` continues into the checkpoint.
pub fn train_initial(
    init: ModelParams,
    labeled: &[(&ImageTensor, usize)],
    cfg: &SupervisedConfig,
    mut rng: ChaCha8Rng,
) -> Result<(Checkpoint, Vec<f64>)> {
    let mut student = init;
    let history = train_supervised(&mut student, labeled, cfg, &mut rng)?;
    Ok((Checkpoint::new(student, rng), history))
}

/// Multi-label pretraining with per-class BCE, then a fresh classification
/// head of `downstream_classes` outputs.
pub fn pretrain_multilabel(
    spec: &ModelSpec,
    samples: &[(&ImageTensor, &[bool])],
    cfg: &SupervisedConfig,
    downstream_classes: usize,
    mut rng: ChaCha8Rng,
) -> Result<(Checkpoint, Vec<f64>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(invalid_input("pretraining manifest is empty"));
    }
    let k = samples[0].1.len();
    if k == 0 || samples.iter().any(|(_, t)| t.len() != k) {
        return Err(invalid_input("every pretraining record needs the same nonzero number of targets"));
    }
    let pre_spec = ModelSpec { num_classes: k, ..*spec };
    let mut params = build_model(&pre_spec, &mut rng)?;
    let mut opt = AdamState::new(params.param_count());
    let mask = params.layout.decay_mask();
    let n_params = params.param_count();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = step_decay(cfg.lr, cfg.lr_gamma, cfg.lr_step_epochs, epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.next_u64()).collect();
            let p = &params;
            let parts = par::map_range(cfg.execution, chunk.len(), |i| -> Result<_> {
                let (img, targets) = samples[chunk[i]];
                let mut r = ChaCha8Rng::seed_from_u64(seeds[i]);
                let (view, _) = weak_augment(img, &cfg.augment, &mut r);
                let (out, cache) = p.forward_view(&view)?;
                let y = Array2::from_shape_fn((1, k), |(_, j)| targets[j] as u8 as f64);
                let x = out.logits.insert_axis(Axis(0));
                let (loss, dl) = bce_with_logits(x.view(), y.view())?;
                let mut grad = vec![0.0; n_params];
                p.backward_view(&cache, Some(dl.row(0)), None, &mut grad);
                Ok((loss, grad))
            });
            let b = chunk.len() as f64;
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(chunk.len());
            for part in parts {
                let (l, g) = part?;
                loss += l / b;
                grads.push(g);
            }
            let mut grad = par::sum_in_order(grads, n_params);
            grad.iter_mut().for_each(|g| *g /= b);
            step += 1;
            check_finite(step, "pretraining loss", &[loss])?;
            opt.update(&cfg.adam, lr, &mut params.data, &grad, Some(&mask));
            epoch_loss += loss * b;
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    let student = params.reset_classifier(downstream_classes, &mut rng)?;
    Ok((Checkpoint::new(student, rng), history))
}

/// One generation of DISTL over `pool`. Student and teacher both start from
/// `prev.teacher`; the published model is the resulting teacher.
pub fn evolve_generation(
    prev: &Checkpoint,
    pool: &[&ImageTensor],
    labeled: &[(&ImageTensor, usize)],
    cfg: &DistillConfig,
    log: &mut dyn FnMut(&LossRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(invalid_input("unlabeled pool is empty"));
    }
    let mut ckpt = Checkpoint {
        student: prev.teacher.clone(),
        teacher: prev.teacher.clone(),
        center: Array1::zeros(prev.teacher.spec.proj_dim),
        optimizer: AdamState::new(prev.teacher.param_count()),
        generation: prev.generation + 1,
        global_step: prev.global_step,
        rng: prev.rng.clone(),
    };
    let steps_per_epoch = pool.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let warmup = steps_per_epoch * cfg.warmup_epochs as u64;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut local = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut ckpt.rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = warmup_cosine(cfg.max_lr, warmup, total, local);
            let m = if cfg.anneal_momentum {
                momentum_cosine(cfg.ema_momentum, total, local)
            } else {
                cfg.ema_momentum
            };
            let batch: Vec<&ImageTensor> = chunk.iter().map(|&i| pool[i]).collect();
            let record = distl_step(&mut ckpt, &batch, cfg, lr, m)?;
            log(&record);
            local += 1;
            if ckpt.global_step % cfg.correction_interval == 0 {
                if let Some(loss) = correction_update(&mut ckpt, labeled, cfg, lr, m)? {
                    log(&LossRecord {
                        generation: ckpt.generation,
                        step: ckpt.global_step,
                        ssl_loss: None,
                        selftrain_loss: None,
                        supervised_loss: Some(loss),
                        correction: true,
                        lr,
                        momentum: m,
                    });
                }
            }
        }
    }
    Ok(ckpt)
}

/// Positive-class probability of the model on each image (class 1 of a
/// binary head, or `1 − p(class 0)` in general).
pub fn positive_scores(params: &ModelParams, images: &[&ImageTensor], exec: Execution) -> Result<Vec<f64>> {
    par::map(exec, images, |img| {
        let out = params.infer(img)?;
        Ok(1.0 - softmax(out.logits.view())[0])
    })
    .into_iter()
    .collect()
}
