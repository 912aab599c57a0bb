use ndarray::{s, Array1, Array2, ArrayView1, Zip};

use super::layers::{
    gelu, gelu_grad, grid_interp_matrix, layer_norm, layer_norm_backward, linear, linear_backward,
    softmax_rows_inplace, LnCache,
};
use super::{BlockLayout, HeadLayout, ModelParams};
use crate::error::{invalid_input, Result};
use crate::par::{self, Execution};
use crate::pipeline::ImageTensor;

/// Per-view network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewOutput {
    pub logits: Array1<f64>,
    pub proj: Array1<f64>,
}

struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct HeadCache {
    x: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
}

/// Activations retained by [`ModelParams::forward_view`] for the backward pass.
pub struct ViewCache {
    patches: Array2<f64>,
    interp: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    cls_head: HeadCache,
    proj_head: HeadCache,
    zn: Array2<f64>,
    bottleneck_norm: f64,
}

impl ViewCache {
    /// Last-layer attention matrices, one `tokens × tokens` matrix per head.
    pub fn last_attention(&self) -> &[Array2<f64>] {
        &self.blocks.last().expect("depth >= 1").attn
    }
}

const NORM_EPS: f64 = 1e-12;

fn head_forward(hl: &HeadLayout, data: &[f64], x: Array2<f64>) -> (Array2<f64>, HeadCache) {
    let z1 = linear(&x, hl.w1.mat(data), hl.b1.vec(data));
    let a1 = z1.mapv(gelu);
    let z2 = linear(&a1, hl.w2.mat(data), hl.b2.vec(data));
    let a2 = z2.mapv(gelu);
    let out = linear(&a2, hl.w3.mat(data), hl.b3.vec(data));
    (out, HeadCache { x, z1, a1, z2, a2 })
}

fn head_backward(hl: &HeadLayout, data: &[f64], c: &HeadCache, dout: &Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
    let da2 = linear_backward(&c.a2, hl.w3.mat(data), dout, hl.w3, Some(hl.b3), grad, true).unwrap();
    let dz2 = da2 * c.z2.mapv(gelu_grad);
    let da1 = linear_backward(&c.a1, hl.w2.mat(data), &dz2, hl.w2, Some(hl.b2), grad, true).unwrap();
    let dz1 = da1 * c.z1.mapv(gelu_grad);
    linear_backward(&c.x, hl.w1.mat(data), &dz1, hl.w1, Some(hl.b1), grad, true).unwrap()
}

fn block_forward(bl: &BlockLayout, data: &[f64], heads: usize, x: Array2<f64>) -> (Array2<f64>, BlockCache) {
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (h1, ln1) = layer_norm(&x, bl.ln1_g.vec(data), bl.ln1_b.vec(data));
    let qkv = linear(&h1, bl.qkv_w.mat(data), bl.qkv_b.vec(data));
    let mut o = Array2::zeros(x.raw_dim());
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut a = q.dot(&k.t());
        a *= scale;
        softmax_rows_inplace(&mut a);
        o.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&a.dot(&v));
        attn.push(a);
    }
    let mut x_mid = linear(&o, bl.proj_w.mat(data), bl.proj_b.vec(data));
    x_mid += &x;
    let (h2, ln2) = layer_norm(&x_mid, bl.ln2_g.vec(data), bl.ln2_b.vec(data));
    let u = linear(&h2, bl.fc1_w.mat(data), bl.fc1_b.vec(data));
    let g = u.mapv(gelu);
    let mut x_out = linear(&g, bl.fc2_w.mat(data), bl.fc2_b.vec(data));
    x_out += &x_mid;
    (
        x_out,
        BlockCache {
            ln1,
            h1,
            qkv,
            attn,
            o,
            ln2,
            h2,
            u,
            g,
        },
    )
}

fn block_backward(
    bl: &BlockLayout,
    data: &[f64],
    heads: usize,
    c: &BlockCache,
    dx_out: Array2<f64>,
    grad: &mut [f64],
) -> Array2<f64> {
    let d = dx_out.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dg = linear_backward(&c.g, bl.fc2_w.mat(data), &dx_out, bl.fc2_w, Some(bl.fc2_b), grad, true).unwrap();
    let mut du = dg;
    Zip::from(&mut du).and(&c.u).for_each(|a, &u| *a *= gelu_grad(u));
    let dh2 = linear_backward(&c.h2, bl.fc1_w.mat(data), &du, bl.fc1_w, Some(bl.fc1_b), grad, true).unwrap();
    let mut dx_mid = dx_out;
    dx_mid += &layer_norm_backward(&c.ln2, bl.ln2_g.vec(data), &dh2, bl.ln2_g, bl.ln2_b, grad);

    let d_o = linear_backward(&c.o, bl.proj_w.mat(data), &dx_mid, bl.proj_w, Some(bl.proj_b), grad, true).unwrap();
    let mut dqkv = Array2::zeros(c.qkv.raw_dim());
    for h in 0..heads {
        let a = &c.attn[h];
        let q = c.qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = c.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = c.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let doh = d_o.slice(s![.., h * dh..(h + 1) * dh]);
        let dv = a.t().dot(&doh);
        let mut ds = doh.dot(&v.t());
        for (mut ds_row, a_row) in ds.rows_mut().into_iter().zip(a.rows()) {
            let inner = ds_row.dot(&a_row);
            Zip::from(&mut ds_row)
                .and(&a_row)
                .for_each(|x, &p| *x = p * (*x - inner) * scale);
        }
        let dq = ds.dot(&k);
        let dk = ds.t().dot(&q);
        dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
        dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
        dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
    }
    let dh1 = linear_backward(&c.h1, bl.qkv_w.mat(data), &dqkv, bl.qkv_w, Some(bl.qkv_b), grad, true).unwrap();
    let mut dx_in = dx_mid;
    dx_in += &layer_norm_backward(&c.ln1, bl.ln1_g.vec(data), &dh1, bl.ln1_g, bl.ln1_b, grad);
    dx_in
}

fn extract_patches(img: &ImageTensor, patch: usize) -> Array2<f64> {
    let grid = img.height() / patch;
    Array2::from_shape_fn((grid * grid, patch * patch), |(i, j)| {
        let (gr, gc) = (i / grid, i % grid);
        let (pr, pc) = (j / patch, j % patch);
        img.0[[gr * patch + pr, gc * patch + pc]]
    })
}

impl ModelParams {
    /// Forward pass on one view, keeping activations for [`Self::backward_view`].
    pub fn forward_view(&self, img: &ImageTensor) -> Result<(ViewOutput, ViewCache)> {
        let spec = &self.spec;
        let l = &*self.layout;
        let data = &self.data[..];
        let side = img
            .side()
            .filter(|&s| spec.supports_side(s))
            .ok_or_else(|| {
                invalid_input(format!(
                    "unsupported input {}x{} (need a square multiple of {} up to {})",
                    img.height(),
                    img.width(),
                    spec.patch_side,
                    spec.input_side
                ))
            })?;
        let grid = side / spec.patch_side;
        let d = spec.embed_dim;

        let patches = extract_patches(img, spec.patch_side);
        let embedded = linear(&patches, l.patch_w.mat(data), l.patch_b.vec(data));
        let pos = l.pos_embed.mat(data);
        let interp = (grid != spec.grid()).then(|| grid_interp_matrix(spec.grid(), grid));
        let pos_patch = match &interp {
            Some(m) => m.dot(&pos.slice(s![1.., ..])),
            None => pos.slice(s![1.., ..]).to_owned(),
        };
        let mut x = Array2::zeros((grid * grid + 1, d));
        x.row_mut(0).assign(&(&l.cls_token.vec(data) + &pos.row(0)));
        x.slice_mut(s![1.., ..]).assign(&(&embedded + &pos_patch));

        let mut blocks = Vec::with_capacity(spec.depth);
        for bl in &l.blocks {
            let (next, cache) = block_forward(bl, data, spec.heads, x);
            blocks.push(cache);
            x = next;
        }
        let cls = x.slice(s![0..1, ..]).to_owned();
        let (feat, final_ln) = layer_norm(&cls, l.norm_g.vec(data), l.norm_b.vec(data));
        let (logits, cls_head) = head_forward(&l.cls_head, data, feat.clone());
        let (bottleneck, proj_head) = head_forward(&l.proj_head, data, feat);
        let bottleneck_norm = bottleneck.row(0).dot(&bottleneck.row(0)).sqrt();
        let zn = &bottleneck / bottleneck_norm.max(NORM_EPS);
        let proj = zn.dot(&l.proj_last.mat(data));
        Ok((
            ViewOutput {
                logits: logits.row(0).to_owned(),
                proj: proj.row(0).to_owned(),
            },
            ViewCache {
                patches,
                interp,
                blocks,
                final_ln,
                cls_head,
                proj_head,
                zn,
                bottleneck_norm,
            },
        ))
    }

    /// Inference-mode forward on one view.
    pub fn infer(&self, img: &ImageTensor) -> Result<ViewOutput> {
        self.forward_view(img).map(|(out, _)| out)
    }

    /// Accumulates parameter gradients into `grad` given upstream gradients of
    /// the logits and/or projections of one view.
    pub fn backward_view(
        &self,
        cache: &ViewCache,
        dlogits: Option<ArrayView1<f64>>,
        dproj: Option<ArrayView1<f64>>,
        grad: &mut [f64],
    ) {
        let spec = &self.spec;
        let l = &*self.layout;
        let data = &self.data[..];
        debug_assert_eq!(grad.len(), data.len());
        let d = spec.embed_dim;

        let mut dfeat = Array2::zeros((1, d));
        if let Some(dl) = dlogits {
            let dl = dl.to_owned().insert_axis(ndarray::Axis(0));
            dfeat += &head_backward(&l.cls_head, data, &cache.cls_head, &dl, grad);
        }
        if let Some(dp) = dproj {
            let dp = dp.to_owned().insert_axis(ndarray::Axis(0));
            let dzn = linear_backward(&cache.zn, l.proj_last.mat(data), &dp, l.proj_last, None, grad, true).unwrap();
            let dz = if cache.bottleneck_norm > NORM_EPS {
                let inner = dzn.row(0).dot(&cache.zn.row(0));
                (&dzn - &(&cache.zn * inner)) / cache.bottleneck_norm
            } else {
                dzn / NORM_EPS
            };
            dfeat += &head_backward(&l.proj_head, data, &cache.proj_head, &dz, grad);
        }
        let dcls = layer_norm_backward(&cache.final_ln, l.norm_g.vec(data), &dfeat, l.norm_g, l.norm_b, grad);

        let tokens = cache.patches.nrows() + 1;
        let mut dx = Array2::zeros((tokens, d));
        dx.row_mut(0).assign(&dcls.row(0));
        for (bl, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            dx = block_backward(bl, data, spec.heads, bc, dx, grad);
        }

        {
            let mut g = l.cls_token.vec_mut(grad);
            g += &dx.row(0);
        }
        let dpatch = dx.slice(s![1.., ..]).to_owned();
        {
            let mut gpos = l.pos_embed.mat_mut(grad);
            {
                let mut row0 = gpos.row_mut(0);
                row0 += &dx.row(0);
            }
            let mut rest = gpos.slice_mut(s![1.., ..]);
            match &cache.interp {
                Some(m) => rest += &m.t().dot(&dpatch),
                None => rest += &dpatch,
            }
        }
        linear_backward(&cache.patches, l.patch_w.mat(data), &dpatch, l.patch_w, Some(l.patch_b), grad, false);
    }
}

/// Batched inference outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    /// batch × num_classes
    pub logits: Array2<f64>,
    /// batch × proj_dim
    pub projections: Array2<f64>,
}

/// Inference-mode forward over a batch of views of one supported side.
pub fn forward(params: &ModelParams, batch: &[ImageTensor], exec: Execution) -> Result<BatchOutput> {
    let outs = par::map(exec, batch, |img| params.infer(img));
    let mut logits = Array2::zeros((batch.len(), params.spec.num_classes));
    let mut projections = Array2::zeros((batch.len(), params.spec.proj_dim));
    for (i, out) in outs.into_iter().enumerate() {
        let out = out?;
        logits.row_mut(i).assign(&out.logits);
        projections.row_mut(i).assign(&out.proj);
    }
    Ok(BatchOutput { logits, projections })
}
