//! Masked generative decoding with decode-time model-size scheduling.
//!
//! A nested transformer family shares one weight set: model `p` uses the
//! leading `1/p` per-head slice of every projection, so one checkpoint serves
//! factors 8/4/2/1 (smallest to full). Decoding runs MaskGIT-style parallel
//! unmasking under a cosine schedule, optionally switching factors mid-decode
//! while reusing committed tokens' KV entries between switches, with
//! classifier-free guidance on the final iterations. A bit-exact FLOPs
//! accountant reproduces the reference cost tables, and a progressive
//! distillation trainer (larger slices teach smaller ones) fits the nested
//! family on synthetic Markov sources with finite-difference-checked
//! gradients.
//!
//! Module map:
//! - [`numerics`]: tensors, seeded RNG streams, matmul/softmax/norm kernels
//! - [`schedules`]: cosine masking math, decode schedules, temperatures
//! - [`nested`]: nested transformer weights, slicing, forward with KV cache
//! - [`decoder`]: iterative parallel decoding, guidance, traces, densities
//! - [`trainer`]: synthetic sources, losses, manual backprop, Adam, checks
//! - [`flops`]: analytic per-iteration cost model and gain reports
//! - [`io`]: checkpoints, run configuration files, presets, report emission

pub mod decoder;
pub mod error;
pub mod flops;
pub mod io;
pub mod nested;
pub mod numerics;
pub mod schedules;
pub mod trainer;

pub use error::{Error, Result};
