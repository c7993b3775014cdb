//! Recorded forward passes and manual reverse-mode gradients.
//!
//! The forward here mirrors the inference path kernel for kernel over the
//! full grid with an empty cache, so training-time logits are bit-identical
//! to the logits the decoder sees (pinned by test). Every intermediate the
//! backward pass needs is kept on a per-sample tape. Backward visits only the
//! weight slices its factor actually reads, with fixed ascending accumulation
//! order, so a sub-model's gradient is structurally zero outside its nested
//! slice; that exactness is what makes the distillation stop-gradient
//! contract hold (teachers receive no gradient through their logits).

use crate::error::{Error, Result};
use crate::nested::{NestedWeights, SlicedModel};
use crate::numerics::{
    gelu_scalar, layer_norm_lane, mm_cols_sliced, mm_rows_sliced, real, softmax_lane, Real,
    Tensor, GELU_C, GELU_CUBIC,
};

// =============================================================================
// Tape structures
// =============================================================================

/// Per-layer intermediates captured by the recorded forward. Row counts are
/// `t = n + 1` (class slot plus grid); widths follow the slicing factor.
#[derive(Debug, Clone)]
struct LayerTape<T> {
    /// Residual stream entering the layer, `[t, d]`.
    x_in: Vec<T>,
    norm1_stats: Vec<(T, T)>,
    normed1: Vec<T>,
    /// Sliced projections, `[t, heads * keep]`.
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention weights, `[heads, t, t]` flattened.
    probs: Vec<T>,
    ctx: Vec<T>,
    /// Residual stream after the attention residual add, `[t, d]`.
    x_mid: Vec<T>,
    norm2_stats: Vec<(T, T)>,
    normed2: Vec<T>,
    /// MLP hidden pre-activation and activation, `[t, mlp_keep]`.
    up_pre: Vec<T>,
    up_act: Vec<T>,
}

/// Complete record of one sample's forward pass at one slicing factor.
#[derive(Debug, Clone)]
pub(crate) struct SampleTape<T> {
    pub(crate) factor: usize,
    class_row: usize,
    input_ids: Vec<u32>,
    layers: Vec<LayerTape<T>>,
    /// Residual stream entering the final norm, `[t, d]`.
    x_out: Vec<T>,
    final_stats: Vec<(T, T)>,
    normed_final: Vec<T>,
    /// `[n, vocab]`, one row per grid position in position order.
    pub(crate) logits: Tensor<T>,
}

// =============================================================================
// Forward
// =============================================================================

/// Run the sliced model over grid positions `0..n` (class slot at row 0),
/// recording everything the backward pass needs. `class_row` is the token
/// embedding row for the class slot (a class row or the unconditional row).
pub(crate) fn forward_tape<T: Real>(
    model: &SlicedModel<'_, T>,
    input_ids: &[u32],
    class_row: usize,
) -> Result<SampleTape<T>> {
    let cfg = model.config;
    let d = cfg.hidden;
    let n = input_ids.len();
    if n == 0 || n > cfg.max_positions {
        return Err(Error::Input(format!(
            "training grid must hold 1..={} positions, got {n}",
            cfg.max_positions
        )));
    }
    if class_row >= cfg.token_rows() {
        return Err(Error::Input(format!(
            "class slot row {class_row} out of range ({} token rows)",
            cfg.token_rows()
        )));
    }
    for &id in input_ids {
        if id > cfg.mask_token() {
            return Err(Error::Input(format!(
                "token id {id} is not a codebook id or the MASK sentinel"
            )));
        }
    }

    let w = model.weights;
    let t = n + 1;
    let nh = cfg.num_heads;
    let hd = cfg.head_dim;
    let keep = model.head_keep;
    let aw = nh * keep;
    let mk = model.mlp_keep;
    let scale = model.attn_scale();

    let mut x = vec![T::zero(); t * d];
    embed_row(&mut x[0..d], w, class_row, 0);
    for (i, &id) in input_ids.iter().enumerate() {
        embed_row(&mut x[(i + 1) * d..(i + 2) * d], w, id as usize, i + 1);
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut scores = vec![T::zero(); t];
    for layer in &w.layers {
        let x_in = x.clone();
        let mut norm1_stats = Vec::with_capacity(t);
        let mut normed1 = vec![T::zero(); t * d];
        for r in 0..t {
            norm1_stats.push(layer_norm_lane(
                &x_in[r * d..(r + 1) * d],
                &layer.norm1_gain,
                &layer.norm1_bias,
                &mut normed1[r * d..(r + 1) * d],
            ));
        }
        let mut q = vec![T::zero(); t * aw];
        let mut k = vec![T::zero(); t * aw];
        let mut v = vec![T::zero(); t * aw];
        mm_cols_sliced(&normed1, t, d, layer.wq.data(), nh, hd, keep, &mut q);
        mm_cols_sliced(&normed1, t, d, layer.wk.data(), nh, hd, keep, &mut k);
        mm_cols_sliced(&normed1, t, d, layer.wv.data(), nh, hd, keep, &mut v);

        let mut probs = vec![T::zero(); nh * t * t];
        let mut ctx = vec![T::zero(); t * aw];
        for h in 0..nh {
            let hoff = h * keep;
            for i in 0..t {
                let qrow = &q[i * aw + hoff..i * aw + hoff + keep];
                for (j, s) in scores.iter_mut().enumerate().take(t) {
                    let krow = &k[j * aw + hoff..j * aw + hoff + keep];
                    let mut dot = T::zero();
                    for (qv, kv) in qrow.iter().zip(krow) {
                        dot = dot + *qv * *kv;
                    }
                    *s = dot * scale;
                }
                softmax_lane(&mut scores[..t]);
                probs[(h * t + i) * t..(h * t + i + 1) * t].copy_from_slice(&scores[..t]);
                let crow = &mut ctx[i * aw + hoff..i * aw + hoff + keep];
                crow.fill(T::zero());
                for (j, &pw) in scores.iter().enumerate().take(t) {
                    let vrow = &v[j * aw + hoff..j * aw + hoff + keep];
                    for (c, vv) in crow.iter_mut().zip(vrow) {
                        *c = *c + pw * *vv;
                    }
                }
            }
        }
        let mut attn = vec![T::zero(); t * d];
        mm_rows_sliced(&ctx, t, nh, hd, keep, layer.wo.data(), d, &mut attn);
        for (xv, av) in x.iter_mut().zip(&attn) {
            *xv = *xv + *av;
        }
        let x_mid = x.clone();

        let mut norm2_stats = Vec::with_capacity(t);
        let mut normed2 = vec![T::zero(); t * d];
        for r in 0..t {
            norm2_stats.push(layer_norm_lane(
                &x_mid[r * d..(r + 1) * d],
                &layer.norm2_gain,
                &layer.norm2_bias,
                &mut normed2[r * d..(r + 1) * d],
            ));
        }
        let mut up_pre = vec![T::zero(); t * mk];
        mm_cols_sliced(&normed2, t, d, layer.w_up.data(), 1, cfg.mlp_dim, mk, &mut up_pre);
        let mut up_act = up_pre.clone();
        for uv in up_act.iter_mut() {
            *uv = gelu_scalar(*uv);
        }
        let mut down = vec![T::zero(); t * d];
        mm_rows_sliced(&up_act, t, 1, cfg.mlp_dim, mk, layer.w_down.data(), d, &mut down);
        for (xv, mv) in x.iter_mut().zip(&down) {
            *xv = *xv + *mv;
        }

        layers.push(LayerTape {
            x_in,
            norm1_stats,
            normed1,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            norm2_stats,
            normed2,
            up_pre,
            up_act,
        });
    }

    let x_out = x;
    let mut final_stats = Vec::with_capacity(t);
    let mut normed_final = vec![T::zero(); t * d];
    for r in 0..t {
        final_stats.push(layer_norm_lane(
            &x_out[r * d..(r + 1) * d],
            &w.final_gain,
            &w.final_bias,
            &mut normed_final[r * d..(r + 1) * d],
        ));
    }
    let vsize = cfg.vocab_size;
    let head = w.output_head.data();
    let mut logits = vec![T::zero(); n * vsize];
    for i in 0..n {
        let f = &normed_final[(i + 1) * d..(i + 2) * d];
        let out = &mut logits[i * vsize..(i + 1) * vsize];
        mm_cols_sliced(f, 1, d, head, 1, vsize, vsize, out);
    }

    Ok(SampleTape {
        factor: model.factor,
        class_row,
        input_ids: input_ids.to_vec(),
        layers,
        x_out,
        final_stats,
        normed_final,
        logits: Tensor::new(logits, vec![n, vsize])?,
    })
}

fn embed_row<T: Real>(dst: &mut [T], weights: &NestedWeights<T>, token_row: usize, seq_row: usize) {
    let tok = weights.token_embedding.row(token_row);
    let pos = weights.pos_embedding.row(seq_row);
    for (d, (a, b)) in dst.iter_mut().zip(tok.iter().zip(pos)) {
        *d = *a + *b;
    }
}

// =============================================================================
// Backward kernels
// =============================================================================

/// Backward of `mm_cols_sliced`. Accumulates into `d_x` and `d_w`; gradient
/// lands only in the leading `keep` columns of each head block of `w`.
fn mm_cols_bwd<T: Real>(
    x: &[T],
    rows: usize,
    d_in: usize,
    w: &[T],
    n_heads: usize,
    head_dim: usize,
    keep: usize,
    d_y: &[T],
    d_x: &mut [T],
    d_w: &mut [T],
) {
    let w_cols = n_heads * head_dim;
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let dyr = &d_y[r * n_heads * keep..(r + 1) * n_heads * keep];
        let dxr = &mut d_x[r * d_in..(r + 1) * d_in];
        for h in 0..n_heads {
            for j in 0..keep {
                let g = dyr[h * keep + j];
                let col = h * head_dim + j;
                for kk in 0..d_in {
                    dxr[kk] = dxr[kk] + g * w[kk * w_cols + col];
                    d_w[kk * w_cols + col] = d_w[kk * w_cols + col] + g * xr[kk];
                }
            }
        }
    }
}

/// Backward of `mm_rows_sliced`. Accumulates into `d_x` and `d_w`; gradient
/// lands only in the leading `keep` rows of each head block of `w`.
fn mm_rows_bwd<T: Real>(
    x: &[T],
    rows: usize,
    n_heads: usize,
    head_dim: usize,
    keep: usize,
    w: &[T],
    d_out: usize,
    d_y: &[T],
    d_x: &mut [T],
    d_w: &mut [T],
) {
    for r in 0..rows {
        let xr = &x[r * n_heads * keep..(r + 1) * n_heads * keep];
        let dyr = &d_y[r * d_out..(r + 1) * d_out];
        let dxr = &mut d_x[r * n_heads * keep..(r + 1) * n_heads * keep];
        for h in 0..n_heads {
            for j in 0..keep {
                let wrow = &w[(h * head_dim + j) * d_out..(h * head_dim + j + 1) * d_out];
                let dwrow = &mut d_w[(h * head_dim + j) * d_out..(h * head_dim + j + 1) * d_out];
                let xv = xr[h * keep + j];
                let mut acc = T::zero();
                for c in 0..d_out {
                    acc = acc + dyr[c] * wrow[c];
                    dwrow[c] = dwrow[c] + xv * dyr[c];
                }
                dxr[h * keep + j] = dxr[h * keep + j] + acc;
            }
        }
    }
}

/// Backward of `layer_norm_lane` for one row; `d_x` and the parameter
/// gradients accumulate. Exact for the epsilon-stabilized variance.
fn layer_norm_bwd_lane<T: Real>(
    x: &[T],
    mean: T,
    rstd: T,
    gain: &[T],
    d_y: &[T],
    d_x: &mut [T],
    d_gain: &mut [T],
    d_bias: &mut [T],
) {
    let dd = x.len();
    let inv_d = T::one() / real::<T>(dd as f64);
    let mut sum_dxh = T::zero();
    let mut sum_dxh_xhat = T::zero();
    for i in 0..dd {
        let xhat = (x[i] - mean) * rstd;
        let dxh = d_y[i] * gain[i];
        d_gain[i] = d_gain[i] + d_y[i] * xhat;
        d_bias[i] = d_bias[i] + d_y[i];
        sum_dxh = sum_dxh + dxh;
        sum_dxh_xhat = sum_dxh_xhat + dxh * xhat;
    }
    let m1 = sum_dxh * inv_d;
    let m2 = sum_dxh_xhat * inv_d;
    for i in 0..dd {
        let xhat = (x[i] - mean) * rstd;
        let dxh = d_y[i] * gain[i];
        d_x[i] = d_x[i] + rstd * (dxh - m1 - xhat * m2);
    }
}

/// Derivative of the tanh-approximation GELU.
fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = real::<T>(0.5);
    let c = real::<T>(GELU_C);
    let a = real::<T>(GELU_CUBIC);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + real::<T>(3.0) * a * x * x)
}

// =============================================================================
// Backward
// =============================================================================

/// Accumulate `d loss / d weights` into `grads` for one recorded sample,
/// given the loss gradient with respect to the sample's logits.
pub(crate) fn backward_tape<T: Real>(
    model: &SlicedModel<'_, T>,
    tape: &SampleTape<T>,
    d_logits: &Tensor<T>,
    grads: &mut NestedWeights<T>,
) -> Result<()> {
    let cfg = model.config;
    if tape.factor != model.factor {
        return Err(Error::Param(format!(
            "tape was recorded at factor {}, backward runs factor {}",
            tape.factor, model.factor
        )));
    }
    if d_logits.shape() != tape.logits.shape() {
        return Err(Error::Shape {
            op: "backward_tape",
            detail: format!(
                "logit gradient shape {:?} != tape logits {:?}",
                d_logits.shape(),
                tape.logits.shape()
            ),
        });
    }
    let d = cfg.hidden;
    let n = tape.input_ids.len();
    let t = n + 1;
    let nh = cfg.num_heads;
    let hd = cfg.head_dim;
    let keep = model.head_keep;
    let aw = nh * keep;
    let mk = model.mlp_keep;
    let vsize = cfg.vocab_size;
    let w = model.weights;
    let scale = model.attn_scale();

    // Output head; the class slot produces no logits, so its row stays zero.
    let mut d_normed = vec![T::zero(); t * d];
    {
        let head = w.output_head.data();
        let d_head = grads.output_head.data_mut();
        for r in 0..n {
            let dl = d_logits.row(r);
            let f = &tape.normed_final[(r + 1) * d..(r + 2) * d];
            let dn = &mut d_normed[(r + 1) * d..(r + 2) * d];
            for kk in 0..d {
                let wrow = &head[kk * vsize..(kk + 1) * vsize];
                let dhrow = &mut d_head[kk * vsize..(kk + 1) * vsize];
                let mut acc = T::zero();
                for vv in 0..vsize {
                    acc = acc + dl[vv] * wrow[vv];
                    dhrow[vv] = dhrow[vv] + f[kk] * dl[vv];
                }
                dn[kk] = dn[kk] + acc;
            }
        }
    }

    // Final norm; d_x then carries dL/d(residual stream).
    let mut d_x = vec![T::zero(); t * d];
    for r in 0..t {
        let (mean, rstd) = tape.final_stats[r];
        layer_norm_bwd_lane(
            &tape.x_out[r * d..(r + 1) * d],
            mean,
            rstd,
            &w.final_gain,
            &d_normed[r * d..(r + 1) * d],
            &mut d_x[r * d..(r + 1) * d],
            &mut grads.final_gain,
            &mut grads.final_bias,
        );
    }

    let mut d_norm_out = vec![T::zero(); t * d];
    let mut d_up = vec![T::zero(); t * mk];
    let mut d_ctx = vec![T::zero(); t * aw];
    let mut d_q = vec![T::zero(); t * aw];
    let mut d_k = vec![T::zero(); t * aw];
    let mut d_v = vec![T::zero(); t * aw];
    let mut d_p = vec![T::zero(); t];
    let mut d_s = vec![T::zero(); t];
    for (li, layer) in w.layers.iter().enumerate().rev() {
        let tl = &tape.layers[li];
        let gl = &mut grads.layers[li];

        // MLP: x_out = x_mid + gelu(normed2 @ w_up) @ w_down. The residual
        // passthrough keeps d_x; the norm2 path accumulates into it.
        d_up.fill(T::zero());
        mm_rows_bwd(&tl.up_act, t, 1, cfg.mlp_dim, mk, layer.w_down.data(), d, &d_x, &mut d_up, gl.w_down.data_mut());
        for (du, &pre) in d_up.iter_mut().zip(&tl.up_pre) {
            *du = *du * gelu_grad_scalar(pre);
        }
        d_norm_out.fill(T::zero());
        mm_cols_bwd(&tl.normed2, t, d, layer.w_up.data(), 1, cfg.mlp_dim, mk, &d_up, &mut d_norm_out, gl.w_up.data_mut());
        for r in 0..t {
            let (mean, rstd) = tl.norm2_stats[r];
            layer_norm_bwd_lane(
                &tl.x_mid[r * d..(r + 1) * d],
                mean,
                rstd,
                &layer.norm2_gain,
                &d_norm_out[r * d..(r + 1) * d],
                &mut d_x[r * d..(r + 1) * d],
                &mut gl.norm2_gain,
                &mut gl.norm2_bias,
            );
        }

        // Attention: x_mid = x_in + (softmax(q k^T / sqrt(keep)) v) @ wo.
        d_ctx.fill(T::zero());
        mm_rows_bwd(&tl.ctx, t, nh, hd, keep, layer.wo.data(), d, &d_x, &mut d_ctx, gl.wo.data_mut());
        d_q.fill(T::zero());
        d_k.fill(T::zero());
        d_v.fill(T::zero());
        for h in 0..nh {
            let hoff = h * keep;
            for i in 0..t {
                let probs = &tl.probs[(h * t + i) * t..(h * t + i + 1) * t];
                let dctx = &d_ctx[i * aw + hoff..i * aw + hoff + keep];
                let mut pdot = T::zero();
                for j in 0..t {
                    let vrow = &tl.v[j * aw + hoff..j * aw + hoff + keep];
                    let mut acc = T::zero();
                    for (dc, vv) in dctx.iter().zip(vrow) {
                        acc = acc + *dc * *vv;
                    }
                    d_p[j] = acc;
                    pdot = pdot + acc * probs[j];
                    let dvrow = &mut d_v[j * aw + hoff..j * aw + hoff + keep];
                    for (dv, dc) in dvrow.iter_mut().zip(dctx) {
                        *dv = *dv + probs[j] * *dc;
                    }
                }
                for j in 0..t {
                    d_s[j] = probs[j] * (d_p[j] - pdot) * scale;
                }
                let qrow = &tl.q[i * aw + hoff..i * aw + hoff + keep];
                for j in 0..t {
                    let ds = d_s[j];
                    let krow = &tl.k[j * aw + hoff..j * aw + hoff + keep];
                    let dqrow = &mut d_q[i * aw + hoff..i * aw + hoff + keep];
                    for (dq, kv) in dqrow.iter_mut().zip(krow) {
                        *dq = *dq + ds * *kv;
                    }
                    let dkrow = &mut d_k[j * aw + hoff..j * aw + hoff + keep];
                    for (dk, qv) in dkrow.iter_mut().zip(qrow) {
                        *dk = *dk + ds * *qv;
                    }
                }
            }
        }
        d_norm_out.fill(T::zero());
        mm_cols_bwd(&tl.normed1, t, d, layer.wq.data(), nh, hd, keep, &d_q, &mut d_norm_out, gl.wq.data_mut());
        mm_cols_bwd(&tl.normed1, t, d, layer.wk.data(), nh, hd, keep, &d_k, &mut d_norm_out, gl.wk.data_mut());
        mm_cols_bwd(&tl.normed1, t, d, layer.wv.data(), nh, hd, keep, &d_v, &mut d_norm_out, gl.wv.data_mut());
        for r in 0..t {
            let (mean, rstd) = tl.norm1_stats[r];
            layer_norm_bwd_lane(
                &tl.x_in[r * d..(r + 1) * d],
                mean,
                rstd,
                &layer.norm1_gain,
                &d_norm_out[r * d..(r + 1) * d],
                &mut d_x[r * d..(r + 1) * d],
                &mut gl.norm1_gain,
                &mut gl.norm1_bias,
            );
        }
    }

    // Embeddings: token row plus learned position row per sequence slot.
    {
        let te = grads.token_embedding.data_mut();
        for (dst, src) in te[tape.class_row * d..(tape.class_row + 1) * d].iter_mut().zip(&d_x[0..d]) {
            *dst = *dst + *src;
        }
        for (i, &id) in tape.input_ids.iter().enumerate() {
            let row = id as usize;
            for (dst, src) in te[row * d..(row + 1) * d].iter_mut().zip(&d_x[(i + 1) * d..(i + 2) * d]) {
                *dst = *dst + *src;
            }
        }
        let pe = grads.pos_embedding.data_mut();
        for (dst, src) in pe[0..d].iter_mut().zip(&d_x[0..d]) {
            *dst = *dst + *src;
        }
        for i in 0..n {
            for (dst, src) in pe[(i + 1) * d..(i + 2) * d].iter_mut().zip(&d_x[(i + 1) * d..(i + 2) * d]) {
                *dst = *dst + *src;
            }
        }
    }
    Ok(())
}

// =============================================================================
// Tests
// =============================================================================
