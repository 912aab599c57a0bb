use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{invalid_config, invalid_input, Result};
use crate::model::{log_softmax, softmax};

fn check_temp(name: &str, t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(invalid_config(format!("{name} must be positive, got {t}")))
    }
}

/// `H(p, softmax(s/τ))` and its gradient with respect to `s`.
fn soft_ce(p: ArrayView1<f64>, s: ArrayView1<f64>, temp: f64) -> (f64, Array1<f64>) {
    let scaled = s.mapv(|v| v / temp);
    let logq = log_softmax(scaled.view());
    let loss = -p.iter().zip(logq.iter()).map(|(a, b)| a * b).sum::<f64>();
    let mass = p.sum();
    let grad = (logq.mapv(f64::exp) * mass - p) / temp;
    (loss, grad)
}

/// Sharpened, centred teacher distributions `softmax((t − c)/τ_t)`.
pub fn teacher_distributions(teacher: ArrayView2<f64>, center: ArrayView1<f64>, teacher_temp: f64) -> Array2<f64> {
    let mut out = Array2::zeros(teacher.raw_dim());
    for (mut row, t) in out.rows_mut().into_iter().zip(teacher.rows()) {
        let z = (&t - &center) / teacher_temp;
        row.assign(&softmax(z.view()));
    }
    out
}

/// Self-supervised view-matching loss and its gradient with respect to the
/// student projections. Student rows list the global views first, in the
/// teacher's order, then the local views; pairs of a global with itself are
/// skipped.
pub fn ssl_loss_grad(
    teacher: ArrayView2<f64>,
    student: ArrayView2<f64>,
    center: ArrayView1<f64>,
    teacher_temp: f64,
    student_temp: f64,
) -> Result<(f64, Array2<f64>)> {
    check_temp("teacher temperature", teacher_temp)?;
    check_temp("student temperature", student_temp)?;
    let d = teacher.ncols();
    if student.ncols() != d || center.len() != d {
        return Err(invalid_input("projection widths of teacher, student and center differ"));
    }
    if student.nrows() < teacher.nrows() {
        return Err(invalid_input("student views must include every teacher global view"));
    }
    let targets = teacher_distributions(teacher, center, teacher_temp);
    let mut grad = Array2::zeros(student.raw_dim());
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (g, p) in targets.rows().into_iter().enumerate() {
        for (v, s) in student.rows().into_iter().enumerate() {
            if v == g {
                continue;
            }
            let (l, dg) = soft_ce(p, s, student_temp);
            total += l;
            let mut row = grad.row_mut(v);
            row += &dg;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Ok((0.0, grad));
    }
    grad /= pairs as f64;
    Ok((total / pairs as f64, grad))
}

pub fn ssl_loss(
    teacher: ArrayView2<f64>,
    student: ArrayView2<f64>,
    center: ArrayView1<f64>,
    teacher_temp: f64,
    student_temp: f64,
) -> Result<f64> {
    ssl_loss_grad(teacher, student, center, teacher_temp, student_temp).map(|(l, _)| l)
}

/// Soft pseudo-label loss: mean over every (teacher view, student view) pair
/// of `H(p_teacher, softmax(s/τ))`, with its gradient in the student logits.
pub fn selftrain_loss_grad(
    teacher_probs: ArrayView2<f64>,
    student_logits: ArrayView2<f64>,
    temp: f64,
) -> Result<(f64, Array2<f64>)> {
    check_temp("self-training temperature", temp)?;
    if teacher_probs.ncols() != student_logits.ncols() {
        return Err(invalid_input(format!(
            "teacher has {} classes, student {}",
            teacher_probs.ncols(),
            student_logits.ncols()
        )));
    }
    let pairs = teacher_probs.nrows() * student_logits.nrows();
    if pairs == 0 {
        return Err(invalid_input("self-training needs at least one teacher and one student view"));
    }
    let mut grad = Array2::zeros(student_logits.raw_dim());
    let mut total = 0.0;
    for p in teacher_probs.rows() {
        for (v, s) in student_logits.rows().into_iter().enumerate() {
            let (l, dg) = soft_ce(p, s, temp);
            total += l;
            let mut row = grad.row_mut(v);
            row += &dg;
        }
    }
    grad /= pairs as f64;
    Ok((total / pairs as f64, grad))
}

pub fn selftrain_loss(teacher_probs: ArrayView2<f64>, student_logits: ArrayView2<f64>, temp: f64) -> Result<f64> {
    selftrain_loss_grad(teacher_probs, student_logits, temp).map(|(l, _)| l)
}

/// Hard-label cross-entropy of one logit vector and its gradient.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    if label >= logits.len() {
        return Err(invalid_input(format!("label {label} outside {} classes", logits.len())));
    }
    let logp = log_softmax(logits);
    let mut grad = logp.mapv(f64::exp);
    grad[label] -= 1.0;
    Ok((-logp[label], grad))
}

/// Per-class sigmoid BCE summed over classes and averaged over rows, with
/// its gradient in the logits.
pub fn bce_with_logits(logits: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != targets.dim() || logits.nrows() == 0 {
        return Err(invalid_input("BCE needs nonempty logits and targets of equal shape"));
    }
    let b = logits.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for ((g, &x), &y) in grad.iter_mut().zip(logits.iter()).zip(targets.iter()) {
        loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        *g = (1.0 / (1.0 + (-x).exp()) - y) / b;
    }
    Ok((loss / b, grad))
}
