//! Nested transformer: one weight set, a family of models.
//!
//! Model `p` (the slicing factor) uses the leading `head_dim/p` columns of
//! each attention head's Q/K/V projections, the matching per-head rows of the
//! attention output projection, and the leading `mlp_dim/p` columns/rows of
//! the MLP pair. Layer norms, embeddings, and the output head always run at
//! full width, so every sliced model reads and writes the same residual
//! stream. Factor 1 is the full model; smaller models are strict prefixes of
//! larger ones (`p=8` inside `p=4` inside `p=2` inside `p=1`).
//!
//! Token embedding row layout: codebook ids `[0, V)`, the MASK sentinel at
//! `V`, class tokens at `V+1 ..= V+num_classes`, and the unconditional (class
//! dropout) token last. Sequence row 0 is the class slot; grid position `i`
//! occupies row `i + 1` with learned absolute positional embeddings.

mod cache;
mod forward;

pub use cache::{KvCache, LayerKv, PassKv};
pub use forward::{ForwardOutput, ForwardRequest, SlicedModel};

use crate::error::{Error, Result};
use crate::numerics::{real, Real, Rng, Tensor};

// =============================================================================
// Configuration
// =============================================================================

/// Shape of a nested transformer family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NestedConfig {
    pub num_layers: usize,
    /// Residual stream width `d`.
    pub hidden: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    /// Full per-head width; every factor must divide it.
    pub head_dim: usize,
    /// Codebook size `V` (grid token ids live in `[0, V)`).
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Grid positions (sequence length excluding the class slot).
    pub max_positions: usize,
    /// Supported slicing factors, ascending, always containing 1.
    pub factors: Vec<usize>,
}

impl NestedConfig {
    pub fn new(
        num_layers: usize,
        hidden: usize,
        mlp_dim: usize,
        num_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        num_classes: usize,
        max_positions: usize,
        factors: Vec<usize>,
    ) -> Result<Self> {
        let cfg = NestedConfig {
            num_layers,
            hidden,
            mlp_dim,
            num_heads,
            head_dim,
            vocab_size,
            num_classes,
            max_positions,
            factors,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden == 0
            || self.mlp_dim == 0
            || self.num_heads == 0
            || self.head_dim == 0
            || self.vocab_size == 0
            || self.max_positions == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.factors.is_empty() {
            return Err(Error::Config("factor list must not be empty".into()));
        }
        let mut sorted = self.factors.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.factors {
            return Err(Error::Config("factors must be ascending and distinct".into()));
        }
        if self.factors[0] != 1 {
            return Err(Error::Config("factor list must include 1 (the full model)".into()));
        }
        for &f in &self.factors {
            if self.head_dim % f != 0 || self.mlp_dim % f != 0 {
                return Err(Error::Config(format!(
                    "factor {f} must divide head_dim {} and mlp_dim {}",
                    self.head_dim, self.mlp_dim
                )));
            }
        }
        Ok(())
    }

    /// Attention width: `num_heads * head_dim` at factor 1.
    #[must_use]
    pub fn attn_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Token-embedding rows: codebook + MASK + classes + unconditional.
    #[must_use]
    pub fn token_rows(&self) -> usize {
        self.vocab_size + 1 + self.num_classes + 1
    }

    /// The MASK sentinel token id.
    #[must_use]
    pub fn mask_token(&self) -> u32 {
        self.vocab_size as u32
    }

    /// Embedding row for class `c`.
    pub fn class_row(&self, class_id: u32) -> Result<usize> {
        if (class_id as usize) < self.num_classes {
            Ok(self.vocab_size + 1 + class_id as usize)
        } else {
            Err(Error::Input(format!(
                "class id {class_id} out of range for {} classes",
                self.num_classes
            )))
        }
    }

    /// Embedding row for the unconditional (dropped-class) token.
    #[must_use]
    pub fn null_row(&self) -> usize {
        self.vocab_size + 1 + self.num_classes
    }

    /// Sequence rows: class slot + grid positions.
    #[must_use]
    pub fn seq_rows(&self) -> usize {
        self.max_positions + 1
    }

    /// Check a factor is supported and return the per-head and MLP keeps.
    pub fn slice_dims(&self, factor: usize) -> Result<(usize, usize)> {
        if !self.factors.contains(&factor) {
            return Err(Error::Config(format!(
                "slicing factor {factor} not among supported factors {:?}",
                self.factors
            )));
        }
        Ok((self.head_dim / factor, self.mlp_dim / factor))
    }
}

// =============================================================================
// Weights
// =============================================================================

/// One transformer block's parameters (pre-norm residual block).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub norm1_gain: Vec<T>,
    pub norm1_bias: Vec<T>,
    /// `[hidden, num_heads * head_dim]` each.
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// `[num_heads * head_dim, hidden]`.
    pub wo: Tensor<T>,
    pub norm2_gain: Vec<T>,
    pub norm2_bias: Vec<T>,
    /// `[hidden, mlp_dim]`.
    pub w_up: Tensor<T>,
    /// `[mlp_dim, hidden]`.
    pub w_down: Tensor<T>,
}

/// Full parameter set for a nested family. Each tensor is stored exactly
/// once; sliced models are views, so the family's parameter count equals the
/// full model's.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedWeights<T> {
    /// `[token_rows, hidden]`.
    pub token_embedding: Tensor<T>,
    /// `[max_positions + 1, hidden]`; row 0 is the class slot.
    pub pos_embedding: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_gain: Vec<T>,
    pub final_bias: Vec<T>,
    /// `[hidden, vocab_size]`; logits cover codebook ids only.
    pub output_head: Tensor<T>,
}

/// Standard deviation for truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

impl<T: Real> NestedWeights<T> {
    /// All-zero parameter set (gradient and optimizer-state buffers).
    #[must_use]
    pub fn zeros(config: &NestedConfig) -> Self {
        let d = config.hidden;
        let a = config.attn_width();
        let layer = || LayerWeights {
            norm1_gain: vec![T::zero(); d],
            norm1_bias: vec![T::zero(); d],
            wq: Tensor::zeros(&[d, a]),
            wk: Tensor::zeros(&[d, a]),
            wv: Tensor::zeros(&[d, a]),
            wo: Tensor::zeros(&[a, d]),
            norm2_gain: vec![T::zero(); d],
            norm2_bias: vec![T::zero(); d],
            w_up: Tensor::zeros(&[d, config.mlp_dim]),
            w_down: Tensor::zeros(&[config.mlp_dim, d]),
        };
        NestedWeights {
            token_embedding: Tensor::zeros(&[config.token_rows(), d]),
            pos_embedding: Tensor::zeros(&[config.seq_rows(), d]),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            final_gain: vec![T::zero(); d],
            final_bias: vec![T::zero(); d],
            output_head: Tensor::zeros(&[d, config.vocab_size]),
        }
    }

    /// Random initialization: projections and embeddings are truncated normal
    /// (std 0.02, resampled beyond two sigma); norm gains 1, biases 0. Draws
    /// fill tensors in parameter-visitation order from the given stream.
    #[must_use]
    pub fn init(config: &NestedConfig, rng: &mut Rng) -> Self {
        let mut w = NestedWeights::zeros(config);
        for slot in w.param_views_mut() {
            if slot.name.ends_with(".gain") {
                slot.data.fill(T::one());
            } else if slot.name.ends_with(".bias") {
                slot.data.fill(T::zero());
            } else {
                for v in slot.data.iter_mut() {
                    *v = real(rng.next_trunc_normal(INIT_STD));
                }
            }
        }
        w
    }

    /// Total parameter count (each shared tensor counted once).
    #[must_use]
    pub fn num_params(&self) -> usize {
        self.param_views().iter().map(|p| p.data.len()).sum()
    }

    /// Named read views over every parameter tensor, in canonical order.
    #[must_use]
    pub fn param_views(&self) -> Vec<ParamView<'_, T>> {
        fn view<'a, T>(name: String, data: &'a [T], shape: Vec<usize>) -> ParamView<'a, T> {
            ParamView { name, data, shape }
        }
        let mut out = Vec::new();
        out.push(view("token_embedding".into(), self.token_embedding.data(), self.token_embedding.shape().to_vec()));
        out.push(view("pos_embedding".into(), self.pos_embedding.data(), self.pos_embedding.shape().to_vec()));
        for (i, l) in self.layers.iter().enumerate() {
            out.push(view(format!("layer{i}.norm1.gain"), &l.norm1_gain, vec![l.norm1_gain.len()]));
            out.push(view(format!("layer{i}.norm1.bias"), &l.norm1_bias, vec![l.norm1_bias.len()]));
            out.push(view(format!("layer{i}.attn.wq"), l.wq.data(), l.wq.shape().to_vec()));
            out.push(view(format!("layer{i}.attn.wk"), l.wk.data(), l.wk.shape().to_vec()));
            out.push(view(format!("layer{i}.attn.wv"), l.wv.data(), l.wv.shape().to_vec()));
            out.push(view(format!("layer{i}.attn.wo"), l.wo.data(), l.wo.shape().to_vec()));
            out.push(view(format!("layer{i}.norm2.gain"), &l.norm2_gain, vec![l.norm2_gain.len()]));
            out.push(view(format!("layer{i}.norm2.bias"), &l.norm2_bias, vec![l.norm2_bias.len()]));
            out.push(view(format!("layer{i}.mlp.up"), l.w_up.data(), l.w_up.shape().to_vec()));
            out.push(view(format!("layer{i}.mlp.down"), l.w_down.data(), l.w_down.shape().to_vec()));
        }
        out.push(view("final_norm.gain".into(), &self.final_gain, vec![self.final_gain.len()]));
        out.push(view("final_norm.bias".into(), &self.final_bias, vec![self.final_bias.len()]));
        out.push(view("output_head".into(), self.output_head.data(), self.output_head.shape().to_vec()));
        out
    }

    /// Named write views, same order as [`Self::param_views`].
    pub fn param_views_mut(&mut self) -> Vec<ParamSlot<'_, T>> {
        let mut out: Vec<ParamSlot<'_, T>> = Vec::new();
        out.push(ParamSlot { name: "token_embedding".into(), data: self.token_embedding.data_mut() });
        out.push(ParamSlot { name: "pos_embedding".into(), data: self.pos_embedding.data_mut() });
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push(ParamSlot { name: format!("layer{i}.norm1.gain"), data: &mut l.norm1_gain });
            out.push(ParamSlot { name: format!("layer{i}.norm1.bias"), data: &mut l.norm1_bias });
            out.push(ParamSlot { name: format!("layer{i}.attn.wq"), data: l.wq.data_mut() });
            out.push(ParamSlot { name: format!("layer{i}.attn.wk"), data: l.wk.data_mut() });
            out.push(ParamSlot { name: format!("layer{i}.attn.wv"), data: l.wv.data_mut() });
            out.push(ParamSlot { name: format!("layer{i}.attn.wo"), data: l.wo.data_mut() });
            out.push(ParamSlot { name: format!("layer{i}.norm2.gain"), data: &mut l.norm2_gain });
            out.push(ParamSlot { name: format!("layer{i}.norm2.bias"), data: &mut l.norm2_bias });
            out.push(ParamSlot { name: format!("layer{i}.mlp.up"), data: l.w_up.data_mut() });
            out.push(ParamSlot { name: format!("layer{i}.mlp.down"), data: l.w_down.data_mut() });
        }
        out.push(ParamSlot { name: "final_norm.gain".into(), data: &mut self.final_gain });
        out.push(ParamSlot { name: "final_norm.bias".into(), data: &mut self.final_bias });
        out.push(ParamSlot { name: "output_head".into(), data: self.output_head.data_mut() });
        out
    }

    /// View of the sub-model at `factor`; borrows, never copies.
    pub fn slice_view<'a>(
        &'a self,
        config: &'a NestedConfig,
        factor: usize,
    ) -> Result<SlicedModel<'a, T>> {
        let (head_keep, mlp_keep) = config.slice_dims(factor)?;
        Ok(SlicedModel { weights: self, config, factor, head_keep, mlp_keep })
    }

    /// Copy the sub-model at `factor` into a dense standalone weight set with
    /// its own (factor-1-only) config. Forward outputs are bit-identical to
    /// the corresponding sliced view.
    pub fn extract_standalone(
        &self,
        config: &NestedConfig,
        factor: usize,
    ) -> Result<(NestedConfig, NestedWeights<T>)> {
        let (keep, mlp_keep) = config.slice_dims(factor)?;
        let sub_cfg = NestedConfig::new(
            config.num_layers,
            config.hidden,
            mlp_keep,
            config.num_heads,
            keep,
            config.vocab_size,
            config.num_classes,
            config.max_positions,
            vec![1],
        )?;
        let d = config.hidden;
        let copy_cols = |w: &Tensor<T>| -> Tensor<T> {
            // Leading `keep` columns of each head block.
            let mut out = Tensor::zeros(&[d, config.num_heads * keep]);
            for r in 0..d {
                let src = w.row(r);
                let dst_row = &mut out.data_mut()[r * config.num_heads * keep..(r + 1) * config.num_heads * keep];
                for h in 0..config.num_heads {
                    for j in 0..keep {
                        dst_row[h * keep + j] = src[h * config.head_dim + j];
                    }
                }
            }
            out
        };
        let copy_head_rows = |w: &Tensor<T>| -> Tensor<T> {
            // Leading `keep` rows of each head block.
            let mut out = Tensor::zeros(&[config.num_heads * keep, d]);
            for h in 0..config.num_heads {
                for j in 0..keep {
                    let src = w.row(h * config.head_dim + j);
                    let dst = h * keep + j;
                    out.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(src);
                }
            }
            out
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut w_up = Tensor::zeros(&[d, mlp_keep]);
                for r in 0..d {
                    w_up.data_mut()[r * mlp_keep..(r + 1) * mlp_keep]
                        .copy_from_slice(&l.w_up.row(r)[..mlp_keep]);
                }
                let mut w_down = Tensor::zeros(&[mlp_keep, d]);
                w_down.data_mut().copy_from_slice(&l.w_down.data()[..mlp_keep * d]);
                LayerWeights {
                    norm1_gain: l.norm1_gain.clone(),
                    norm1_bias: l.norm1_bias.clone(),
                    wq: copy_cols(&l.wq),
                    wk: copy_cols(&l.wk),
                    wv: copy_cols(&l.wv),
                    wo: copy_head_rows(&l.wo),
                    norm2_gain: l.norm2_gain.clone(),
                    norm2_bias: l.norm2_bias.clone(),
                    w_up,
                    w_down,
                }
            })
            .collect();
        let weights = NestedWeights {
            token_embedding: self.token_embedding.clone(),
            pos_embedding: self.pos_embedding.clone(),
            layers,
            final_gain: self.final_gain.clone(),
            final_bias: self.final_bias.clone(),
            output_head: self.output_head.clone(),
        };
        Ok((sub_cfg, weights))
    }
}

/// Named read-only view of one parameter tensor.
pub struct ParamView<'a, T> {
    pub name: String,
    pub data: &'a [T],
    pub shape: Vec<usize>,
}

/// Named mutable view of one parameter tensor.
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub data: &'a mut [T],
}

// =============================================================================
// Tests
// =============================================================================
