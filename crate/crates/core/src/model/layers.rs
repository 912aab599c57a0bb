use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::Slot;

pub(crate) const LN_EPS: f64 = 1e-6;

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer norm.
pub(crate) fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, inv_std })
}

/// Backward of [`layer_norm`]; accumulates gain/bias grads into `grad`.
pub(crate) fn layer_norm_backward(
    cache: &LnCache,
    g: ArrayView1<f64>,
    dy: &Array2<f64>,
    g_slot: Slot,
    b_slot: Slot,
    grad: &mut [f64],
) -> Array2<f64> {
    {
        let mut dg = g_slot.vec_mut(grad);
        dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    }
    {
        let mut db = b_slot.vec_mut(grad);
        db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let dxhat = dy * &g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, dh), xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_dh = dh.sum() / d;
        let mean_dhx = dh.dot(&xh) / d;
        for ((o, &a), &x) in out.iter_mut().zip(dh.iter()).zip(xh.iter()) {
            *o = s * (a - mean_dh - x * mean_dhx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// Numerically stable softmax of a slice.
pub fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut e = x.mapv(|v| (v - max).exp());
    let s = e.sum();
    e /= s;
    e
}

/// Log-softmax of a slice.
pub fn log_softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.mapv(|v| v - lse)
}

pub(crate) fn softmax_rows_inplace(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// `x · W + b` for a row batch.
pub(crate) fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulates `dW += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·Wᵀ`.
pub(crate) fn linear_backward(
    x: &Array2<f64>,
    w: ArrayView2<f64>,
    dy: &Array2<f64>,
    w_slot: Slot,
    b_slot: Option<Slot>,
    grad: &mut [f64],
    need_dx: bool,
) -> Option<Array2<f64>> {
    {
        let mut dw = w_slot.mat_mut(grad);
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut dw);
    }
    if let Some(b_slot) = b_slot {
        let mut db = b_slot.vec_mut(grad);
        db += &dy.sum_axis(Axis(0));
    }
    need_dx.then(|| dy.dot(&w.t()))
}

/// Bilinear taps (half-pixel centers) from a grid of `src` cells to `dst`.
fn interp_taps(src: usize, dst: usize) -> Array2<f64> {
    let mut m = Array2::zeros((dst, src));
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(src - 1);
        let f = x - x0 as f64;
        m[[i, x0]] += 1.0 - f;
        m[[i, x1]] += f;
    }
    m
}

/// Matrix mapping a `src`×`src` grid of position embeddings onto a
/// `dst`×`dst` grid (row-major cells).
pub(crate) fn grid_interp_matrix(src: usize, dst: usize) -> Array2<f64> {
    let t = interp_taps(src, dst);
    let mut m = Array2::zeros((dst * dst, src * src));
    for r in 0..dst {
        for c in 0..dst {
            for sr in 0..src {
                let wr = t[[r, sr]];
                if wr == 0.0 {
                    continue;
                }
                for sc in 0..src {
                    let wc = t[[c, sc]];
                    if wc != 0.0 {
                        m[[r * dst + c, sr * src + sc]] += wr * wc;
                    }
                }
            }
        }
    }
    m
}
