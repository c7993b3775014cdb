//! Inference-cost accounting for iterative parallel decoding.
//!
//! The cost model is a deliberate, literal port of a simple per-iteration
//! formula, kept verbatim so its outputs line up with published GFLOPs
//! figures:
//!
//! - `qkv = 4 * T * d * (d // p)` and `mlp = 2 * T * (mlp // p) * d` use
//!   floor divisions of the full widths by the slicing factor;
//! - `attn = 2 * T * (T + cached) * d` intentionally does not scale with `p`;
//! - cached-token counts follow the real-valued cosine schedule, not the
//!   decoder's integer commit counts (they agree within one token);
//! - guided iterations cost double, refresh iterations process everything,
//!   and conditioning tokens are processed only at iteration 0 and refreshes.

use crate::error::{Error, Result};
use crate::schedules::{mask_ratio, DecodeSchedule};

use std::fmt::Write as _;

/// Transformer shape used by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub num_layers: usize,
    pub hidden: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
}

impl ModelDims {
    /// Small. The usual 22M-parameter shape for this family is not publicly
    /// pinned; this is the standard 12x512 shape (37.8M core params) and is
    /// labeled an assumption in report headers.
    pub const S: ModelDims =
        ModelDims { num_layers: 12, hidden: 512, mlp_dim: 2048, num_heads: 8 };
    /// Base, 85.0M core params.
    pub const B: ModelDims =
        ModelDims { num_layers: 12, hidden: 768, mlp_dim: 3072, num_heads: 12 };
    /// Large, 302.1M core params; pinned by the 8-step 647-GFLOPs cross-check.
    pub const L: ModelDims =
        ModelDims { num_layers: 24, hidden: 1024, mlp_dim: 4096, num_heads: 16 };
    /// Extra large, 446.0M core params.
    pub const XL: ModelDims =
        ModelDims { num_layers: 28, hidden: 1152, mlp_dim: 4608, num_heads: 18 };

    pub fn by_name(name: &str) -> Result<ModelDims> {
        match name.to_ascii_uppercase().as_str() {
            "S" => Ok(Self::S),
            "B" => Ok(Self::B),
            "L" => Ok(Self::L),
            "XL" => Ok(Self::XL),
            other => Err(Error::Config(format!(
                "unknown model size {other:?} (expected S, B, L, or XL)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.mlp_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.hidden % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.num_heads
            )));
        }
        Ok(())
    }

    /// Parameters in the transformer blocks alone (attention + MLP + layer
    /// norms), excluding embeddings and the output head.
    #[must_use]
    pub fn core_params(&self) -> usize {
        let d = self.hidden;
        let per_layer = 4 * d * d + 2 * d * self.mlp_dim + 4 * d;
        self.num_layers * per_layer
    }
}

/// GFLOPs of one decoding iteration that attends over `num_cached` cached
/// tokens and processes `num_processed` tokens at slicing factor `factor`.
///
/// Counts are real-valued because the schedule-level accounting tracks the
/// cosine curve, not integer commits.
#[must_use]
pub fn get_flops(num_cached: f64, num_processed: f64, factor: usize, dims: &ModelDims) -> f64 {
    let t = num_processed;
    let d = dims.hidden as f64;
    let qkv = 4.0 * t * d * ((dims.hidden / factor) as f64);
    let attn = 2.0 * t * (t + num_cached) * d;
    let mlp = 2.0 * t * ((dims.mlp_dim / factor) as f64) * d;
    (qkv + attn + mlp) * dims.num_layers as f64 / 1e9
}

/// One decode run's cost-model inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsQuery {
    pub num_iters: usize,
    pub use_cache: bool,
    /// Iterations whose pass reprocesses everything; each in `[1, K)`.
    pub refresh_at: Vec<usize>,
    /// Grid tokens plus the class slot, conditioning included.
    pub total_tokens: usize,
    /// Pre-committed tokens, cached except at iteration 0 and refreshes.
    pub num_cond_tokens: usize,
    /// Slicing factor per iteration; length `num_iters`.
    pub model_id_schedule: Vec<usize>,
    /// Iterations that also run the unconditional stream, at double cost.
    pub guided_iters: Vec<usize>,
}

impl FlopsQuery {
    /// Fixed-size, uncached, unguided run over `total_tokens`.
    #[must_use]
    pub fn baseline(num_iters: usize, total_tokens: usize) -> Self {
        FlopsQuery {
            num_iters,
            use_cache: false,
            refresh_at: Vec::new(),
            total_tokens,
            num_cond_tokens: 0,
            model_id_schedule: vec![1; num_iters],
            guided_iters: Vec::new(),
        }
    }

    /// Replace the per-iteration factors with a schedule's expansion.
    #[must_use]
    pub fn with_schedule(mut self, schedule: &DecodeSchedule) -> Self {
        self.num_iters = schedule.k_total();
        self.model_id_schedule = schedule.expand();
        self
    }

    /// Enable caching with the given refresh iterations.
    #[must_use]
    pub fn cached(mut self, refresh_at: Vec<usize>) -> Self {
        self.use_cache = true;
        self.refresh_at = refresh_at;
        self
    }

    /// Guide (and double the cost of) the final `x` iterations.
    #[must_use]
    pub fn guided_last(mut self, x: usize) -> Self {
        self.guided_iters = (self.num_iters.saturating_sub(x)..self.num_iters).collect();
        self
    }

    /// Mark `n` of the tokens as pre-committed conditioning.
    #[must_use]
    pub fn conditioned(mut self, n: usize) -> Self {
        self.num_cond_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_iters == 0 {
            return Err(Error::Config("query needs at least one iteration".into()));
        }
        if self.model_id_schedule.len() != self.num_iters {
            return Err(Error::Config(format!(
                "schedule length {} != num_iters {}",
                self.model_id_schedule.len(),
                self.num_iters
            )));
        }
        if self.model_id_schedule.iter().any(|&f| f == 0) {
            return Err(Error::Config("slicing factors must be >= 1".into()));
        }
        if self.num_cond_tokens >= self.total_tokens {
            return Err(Error::Config(format!(
                "{} conditioning tokens leave nothing to decode out of {}",
                self.num_cond_tokens, self.total_tokens
            )));
        }
        for &r in &self.refresh_at {
            if r == 0 || r >= self.num_iters {
                return Err(Error::Config(format!(
                    "refresh point {r} outside (0, {})",
                    self.num_iters
                )));
            }
        }
        Ok(())
    }
}

/// Cost-model view of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationCost {
    pub iteration: usize,
    pub factor: usize,
    /// Tokens attended from cache (cosine-valued, conditioning included).
    pub cached: f64,
    /// Tokens processed by the pass.
    pub processed: f64,
    pub refreshed: bool,
    pub guided: bool,
    /// Cost of the iteration, doubled when guided.
    pub gflops: f64,
}

/// Per-iteration cost breakdown of a run.
pub fn iteration_costs(q: &FlopsQuery, dims: &ModelDims) -> Result<Vec<IterationCost>> {
    q.validate()?;
    dims.validate()?;
    let pool = (q.total_tokens - q.num_cond_tokens) as f64;
    let cond = q.num_cond_tokens as f64;
    let mut rows = Vec::with_capacity(q.num_iters);
    let mut num_cached = 0.0f64;
    for i in 0..q.num_iters {
        let factor = q.model_id_schedule[i];
        let refreshed = i > 0 && q.use_cache && q.refresh_at.contains(&i);
        let (cached, processed) = if i == 0 || refreshed {
            (0.0, pool + cond)
        } else {
            (num_cached + cond, pool - num_cached)
        };
        let guided = q.guided_iters.contains(&i);
        let mut gflops = get_flops(cached, processed, factor, dims);
        if guided {
            gflops *= 2.0;
        }
        rows.push(IterationCost { iteration: i, factor, cached, processed, refreshed, guided, gflops });
        if q.use_cache {
            num_cached = pool - mask_ratio(i, q.num_iters) * pool;
        }
    }
    Ok(rows)
}

/// Total inference GFLOPs of a run.
pub fn get_total_flops(q: &FlopsQuery, dims: &ModelDims) -> Result<f64> {
    Ok(iteration_costs(q, dims)?.iter().map(|r| r.gflops).sum())
}

/// One row of a cost-comparison report.
#[derive(Debug, Clone, PartialEq)]
pub struct GainEntry {
    pub label: String,
    pub gflops: f64,
    /// `baseline gflops / this row's gflops`.
    pub gain: f64,
    pub is_baseline: bool,
}

/// Cost comparison of several runs against one designated baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct GainReport {
    pub dims_note: String,
    pub entries: Vec<GainEntry>,
}

impl GainReport {
    /// Aligned fixed-decimal text table.
    #[must_use]
    pub fn render_text(&self) -> String {
        let width = self
            .entries
            .iter()
            .map(|e| e.label.len())
            .chain(["configuration".len()])
            .max()
            .unwrap_or(0);
        let mut out = format!("# dims: {}\n", self.dims_note);
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>6}", "configuration", "gflops", "gain");
        for e in &self.entries {
            let mark = if e.is_baseline { " (baseline)" } else { "" };
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.2}  {:>5.2}x{mark}",
                e.label, e.gflops, e.gain
            );
        }
        out
    }

    #[must_use]
    pub fn render_csv(&self) -> String {
        let mut out = String::from("configuration,gflops,gain,baseline\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{}",
                e.label,
                e.gflops,
                e.gain,
                u8::from(e.is_baseline)
            );
        }
        out
    }
}

/// Evaluate labeled queries and report each one's cost and its gain relative
/// to the query at `baseline_index`.
pub fn gain_report(
    queries: &[(String, FlopsQuery)],
    baseline_index: usize,
    dims: &ModelDims,
    dims_note: &str,
) -> Result<GainReport> {
    if queries.is_empty() {
        return Err(Error::Input("gain report needs at least one query".into()));
    }
    if baseline_index >= queries.len() {
        return Err(Error::Input(format!(
            "baseline index {baseline_index} out of range for {} queries",
            queries.len()
        )));
    }
    let totals: Vec<f64> = queries
        .iter()
        .map(|(_, q)| get_total_flops(q, dims))
        .collect::<Result<_>>()?;
    let base = totals[baseline_index];
    if base <= 0.0 {
        return Err(Error::Numeric("baseline cost must be positive".into()));
    }
    let entries = queries
        .iter()
        .zip(&totals)
        .enumerate()
        .map(|(i, ((label, _), &gflops))| GainEntry {
            label: label.clone(),
            gflops,
            gain: base / gflops,
            is_baseline: i == baseline_index,
        })
        .collect();
    Ok(GainReport { dims_note: dims_note.to_string(), entries })
}

// =============================================================================
// Tests
// =============================================================================
