//! Sliced forward pass with KV caching.
//!
//! Layout per pass: row 0 is the class slot (conditional class token or the
//! unconditional token), rows 1.. are the requested grid positions sorted
//! ascending; logits are scattered back to request order on return. Attention
//! is fully bidirectional. Keys/values per head are ordered cached rows first
//! (storage order), then processed rows; all accumulations run in fixed
//! ascending loops, so a pass over identical row sets is bit-reproducible and
//! a sliced view matches its extracted standalone model bit for bit.

use crate::error::{Error, Result};
use crate::numerics::{gelu_scalar, layer_norm_lane, mm_cols_sliced, mm_rows_sliced, real, softmax_lane};
use crate::numerics::{Real, Tensor};

use super::cache::{KvCache, LayerKv, PassKv};
use super::{NestedConfig, NestedWeights};

/// One forward request: grid positions with their current token ids (MASK
/// sentinel for undecided) plus the conditioning class.
#[derive(Debug, Clone)]
pub struct ForwardRequest<'a> {
    /// `(grid position, token id)`; ids must be codebook ids or MASK.
    pub grid: &'a [(usize, u32)],
    /// `None` runs the unconditional (dropped-class) stream.
    pub class_id: Option<u32>,
}

/// Forward results: logits per requested grid position (request order) and
/// the pass's cacheable KV rows (ascending position order).
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[request rows, vocab_size]`.
    pub logits: Tensor<T>,
    pub kv: PassKv<T>,
}

/// Borrowed view of the sub-model at one slicing factor.
#[derive(Debug, Clone, Copy)]
pub struct SlicedModel<'a, T> {
    pub weights: &'a NestedWeights<T>,
    pub config: &'a NestedConfig,
    pub factor: usize,
    /// `head_dim / factor`.
    pub head_keep: usize,
    /// `mlp_dim / factor`.
    pub mlp_keep: usize,
}

impl<'a, T: Real> SlicedModel<'a, T> {
    /// Attention score scale: reciprocal square root of the sliced per-head
    /// width, so extracted standalone models score identically.
    #[must_use]
    pub fn attn_scale(&self) -> T {
        real(1.0 / (self.head_keep as f64).sqrt())
    }

    /// Run the model over the requested rows, attending over `cache` plus the
    /// pass itself. The cache is read-only; committing produced KV rows is the
    /// caller's decision.
    pub fn forward(&self, req: &ForwardRequest, cache: &KvCache<T>) -> Result<ForwardOutput<T>> {
        let cfg = self.config;
        let d = cfg.hidden;
        self.validate(req, cache)?;

        // Canonical internal order: class slot, then grid ascending.
        let g = req.grid.len();
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_unstable_by_key(|&i| req.grid[i].0);
        let t = g + 1;

        // Embedding: token row + learned absolute position row.
        let mut x = vec![T::zero(); t * d];
        let class_row = match req.class_id {
            Some(c) => cfg.class_row(c)?,
            None => cfg.null_row(),
        };
        embed_row(&mut x[0..d], self.weights, class_row, 0);
        for (slot, &ri) in order.iter().enumerate() {
            let (pos, id) = req.grid[ri];
            embed_row(&mut x[(slot + 1) * d..(slot + 2) * d], self.weights, id as usize, pos + 1);
        }

        let nh = cfg.num_heads;
        let hd = cfg.head_dim;
        let keep = self.head_keep;
        let aw = nh * keep;
        let cached = cache.len();
        let s_total = cached + t;
        let scale = self.attn_scale();

        let mut kv_layers: Vec<LayerKv<T>> = Vec::with_capacity(cfg.num_layers);
        let mut normed = vec![T::zero(); t * d];
        let mut q = vec![T::zero(); t * aw];
        let mut k_new = vec![T::zero(); t * aw];
        let mut v_new = vec![T::zero(); t * aw];
        let mut ctx = vec![T::zero(); t * aw];
        let mut attn = vec![T::zero(); t * d];
        let mut scores = vec![T::zero(); s_total];
        let mut up = vec![T::zero(); t * self.mlp_keep];
        let mut down = vec![T::zero(); t * d];
        let empty_kv = LayerKv { k: Vec::new(), v: Vec::new() };

        for layer in &self.weights.layers {
            for r in 0..t {
                layer_norm_lane(
                    &x[r * d..(r + 1) * d],
                    &layer.norm1_gain,
                    &layer.norm1_bias,
                    &mut normed[r * d..(r + 1) * d],
                );
            }
            mm_cols_sliced(&normed, t, d, layer.wq.data(), nh, hd, keep, &mut q);
            mm_cols_sliced(&normed, t, d, layer.wk.data(), nh, hd, keep, &mut k_new);
            mm_cols_sliced(&normed, t, d, layer.wv.data(), nh, hd, keep, &mut v_new);

            let lcache =
                if cached == 0 { &empty_kv } else { cache.layer(kv_layers.len()) };
            for h in 0..nh {
                let hoff = h * keep;
                for i in 0..t {
                    let qrow = &q[i * aw + hoff..i * aw + hoff + keep];
                    for (j, s) in scores.iter_mut().enumerate().take(s_total) {
                        let krow = if j < cached {
                            &lcache.k[j * aw + hoff..j * aw + hoff + keep]
                        } else {
                            let jj = j - cached;
                            &k_new[jj * aw + hoff..jj * aw + hoff + keep]
                        };
                        let mut dot = T::zero();
                        for (qv, kv) in qrow.iter().zip(krow) {
                            dot = dot + *qv * *kv;
                        }
                        *s = dot * scale;
                    }
                    softmax_lane(&mut scores[..s_total]);
                    let crow = &mut ctx[i * aw + hoff..i * aw + hoff + keep];
                    crow.fill(T::zero());
                    for (j, &w) in scores.iter().enumerate().take(s_total) {
                        let vrow = if j < cached {
                            &lcache.v[j * aw + hoff..j * aw + hoff + keep]
                        } else {
                            let jj = j - cached;
                            &v_new[jj * aw + hoff..jj * aw + hoff + keep]
                        };
                        for (c, vv) in crow.iter_mut().zip(vrow) {
                            *c = *c + w * *vv;
                        }
                    }
                }
            }
            mm_rows_sliced(&ctx, t, nh, hd, keep, layer.wo.data(), d, &mut attn);
            for (xv, av) in x.iter_mut().zip(&attn) {
                *xv = *xv + *av;
            }

            for r in 0..t {
                layer_norm_lane(
                    &x[r * d..(r + 1) * d],
                    &layer.norm2_gain,
                    &layer.norm2_bias,
                    &mut normed[r * d..(r + 1) * d],
                );
            }
            mm_cols_sliced(&normed, t, d, layer.w_up.data(), 1, cfg.mlp_dim, self.mlp_keep, &mut up);
            for v in up.iter_mut() {
                *v = gelu_scalar(*v);
            }
            mm_rows_sliced(&up, t, 1, cfg.mlp_dim, self.mlp_keep, layer.w_down.data(), d, &mut down);
            for (xv, mv) in x.iter_mut().zip(&down) {
                *xv = *xv + *mv;
            }

            // Grid rows (1..t) are cacheable; the class slot never is.
            kv_layers.push(LayerKv { k: k_new[aw..t * aw].to_vec(), v: v_new[aw..t * aw].to_vec() });
        }

        // Final norm and logits for grid rows only.
        for r in 0..t {
            layer_norm_lane(
                &x[r * d..(r + 1) * d],
                &self.weights.final_gain,
                &self.weights.final_bias,
                &mut normed[r * d..(r + 1) * d],
            );
        }
        let v_size = cfg.vocab_size;
        let head = self.weights.output_head.data();
        let mut logits = vec![T::zero(); g * v_size];
        for (slot, &ri) in order.iter().enumerate() {
            let f = &normed[(slot + 1) * d..(slot + 2) * d];
            let out = &mut logits[ri * v_size..(ri + 1) * v_size];
            mm_cols_sliced(f, 1, d, head, 1, v_size, v_size, out);
        }

        let positions: Vec<usize> = order.iter().map(|&ri| req.grid[ri].0).collect();
        Ok(ForwardOutput {
            logits: Tensor::new(logits, vec![g, v_size])?,
            kv: PassKv { factor: self.factor, width: aw, positions, layers: kv_layers },
        })
    }

    fn validate(&self, req: &ForwardRequest, cache: &KvCache<T>) -> Result<()> {
        let cfg = self.config;
        if let Some(f) = cache.factor() {
            if f != self.factor {
                return Err(Error::Cache(format!(
                    "cache holds factor-{f} entries; forward runs factor {}",
                    self.factor
                )));
            }
        }
        let mut seen = vec![false; cfg.max_positions];
        for &(pos, id) in req.grid {
            if pos >= cfg.max_positions {
                return Err(Error::Input(format!(
                    "grid position {pos} out of range ({} positions)",
                    cfg.max_positions
                )));
            }
            if seen[pos] {
                return Err(Error::Input(format!("grid position {pos} appears twice")));
            }
            seen[pos] = true;
            if id > cfg.mask_token() {
                return Err(Error::Input(format!(
                    "token id {id} is not a codebook id or the MASK sentinel"
                )));
            }
            if cache.contains(pos) {
                return Err(Error::Cache(format!(
                    "grid position {pos} is cached; cached positions are never recomputed"
                )));
            }
        }
        if let Some(c) = req.class_id {
            cfg.class_row(c)?;
        }
        Ok(())
    }
}

fn embed_row<T: Real>(dst: &mut [T], weights: &NestedWeights<T>, token_row: usize, seq_row: usize) {
    let tok = weights.token_embedding.row(token_row);
    let pos = weights.pos_embedding.row(seq_row);
    for (d, (a, b)) in dst.iter_mut().zip(tok.iter().zip(pos)) {
        *d = *a + *b;
    }
}
