//! Cosine masking math, decode-time model-size schedules, and the scalar
//! knobs (temperatures, guidance mixing, distillation decay) shared by the
//! decoder and trainer.
//!
//! All scalar functions here are f64; precision-generic callers convert at
//! the boundary so f32 and f64 models consume identical schedule values.

use crate::error::{Error, Result};

use std::fmt;

// =============================================================================
// Cosine masking schedule
// =============================================================================

/// Fraction of tokens still masked entering iteration `k` of `K`:
/// `cos(pi/2 * k / K)`. Contract: `K >= 1`, `0 <= k <= K`.
#[must_use]
pub fn mask_ratio(k: usize, k_total: usize) -> f64 {
    assert!(k_total >= 1, "mask_ratio: K must be >= 1");
    assert!(k <= k_total, "mask_ratio: k={k} out of range for K={k_total}");
    (std::f64::consts::FRAC_PI_2 * k as f64 / k_total as f64).cos()
}

/// Tokens still masked entering iteration `k` under the cosine schedule.
#[must_use]
pub fn masked_before(k: usize, k_total: usize, n: usize) -> usize {
    (n as f64 * mask_ratio(k, k_total)).floor() as usize
}

/// Tokens newly committed at iteration `k` of a `K`-step decode over `n`
/// maskable tokens: `floor(n * ratio(k)) - floor(n * ratio(k+1))`, clamped to
/// at least 1 whenever any token is still masked. The final iteration commits
/// everything that remains (`ratio(K) ~ 0`).
#[must_use]
pub fn unmask_count(k: usize, k_total: usize, n: usize) -> usize {
    let before = masked_before(k, k_total, n);
    if before == 0 {
        return 0;
    }
    let after = masked_before(k + 1, k_total, n);
    (before - after).max(1)
}

/// Categorical sampling temperature at iteration `k`:
/// `bias + scale * (1 - (k+1)/K)`, linearly annealed.
#[must_use]
pub fn sampling_temperature(k: usize, k_total: usize, bias: f64, scale: f64) -> f64 {
    assert!(k_total >= 1 && k < k_total, "sampling_temperature: k out of range");
    bias + scale * (1.0 - (k + 1) as f64 / k_total as f64)
}

/// Guidance mixing weight at iteration `k`: `1 - mask_ratio(k, K)`, so
/// guidance strengthens as the grid fills in.
#[must_use]
pub fn guidance_lambda(k: usize, k_total: usize) -> f64 {
    1.0 - mask_ratio(k, k_total)
}

/// Distillation ground-truth weight at step `t` of `T`: `1 - t/T`, decaying
/// linearly from 1 to 0. Contract: `0 <= t <= T`, `T >= 1`.
#[must_use]
pub fn alpha_decay(t: usize, t_total: usize) -> f64 {
    assert!(t_total >= 1, "alpha_decay: T must be >= 1");
    assert!(t <= t_total, "alpha_decay: t={t} out of range for T={t_total}");
    1.0 - t as f64 / t_total as f64
}

// =============================================================================
// Decode schedule
// =============================================================================

/// One run of consecutive iterations at a fixed slicing factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleEntry {
    /// Slicing factor `p` (1 = full model).
    pub factor: usize,
    /// Number of consecutive iterations at this factor; zero entries are
    /// legal and skipped.
    pub iterations: usize,
}

/// Decode-time model-size schedule: which slicing factor runs each iteration.
///
/// Invariant: entry iteration counts sum to `k_total`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeSchedule {
    entries: Vec<ScheduleEntry>,
    k_total: usize,
}

impl DecodeSchedule {
    /// Build a schedule, checking the iteration-count invariant.
    pub fn new(entries: Vec<ScheduleEntry>, k_total: usize) -> Result<Self> {
        let sum: usize = entries.iter().map(|e| e.iterations).sum();
        if sum != k_total {
            return Err(Error::Config(format!(
                "schedule iterations sum to {sum}, expected K={k_total}"
            )));
        }
        if k_total == 0 {
            return Err(Error::Config("schedule must have at least one iteration".into()));
        }
        for e in &entries {
            if e.factor == 0 {
                return Err(Error::Config("schedule factor must be positive".into()));
            }
        }
        Ok(DecodeSchedule { entries, k_total })
    }

    /// Parse the literal form `"8x3,4x3,2x3,1x3"` (factor x iterations).
    pub fn from_literal(s: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let (f, n) = part.split_once('x').ok_or_else(|| {
                Error::Config(format!("schedule entry '{part}' is not of the form FACTORxCOUNT"))
            })?;
            let factor: usize = f
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad schedule factor '{f}'")))?;
            let iterations: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad schedule count '{n}'")))?;
            entries.push(ScheduleEntry { factor, iterations });
        }
        let k_total = entries.iter().map(|e| e.iterations).sum();
        DecodeSchedule::new(entries, k_total)
    }

    /// Single-factor schedule (the baseline uses factor 1 for all K).
    #[must_use]
    pub fn uniform(factor: usize, k_total: usize) -> Self {
        DecodeSchedule {
            entries: vec![ScheduleEntry { factor, iterations: k_total }],
            k_total,
        }
    }

    #[must_use]
    pub fn k_total(&self) -> usize {
        self.k_total
    }

    #[must_use]
    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    /// Factor for each iteration, length `k_total`.
    #[must_use]
    pub fn expand(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.k_total);
        for e in &self.entries {
            out.extend(std::iter::repeat(e.factor).take(e.iterations));
        }
        out
    }

    /// Factor at iteration `k`. Contract: `k < k_total`.
    #[must_use]
    pub fn factor_at(&self, k: usize) -> usize {
        assert!(k < self.k_total, "factor_at: k={k} out of range");
        let mut rem = k;
        for e in &self.entries {
            if rem < e.iterations {
                return e.factor;
            }
            rem -= e.iterations;
        }
        unreachable!("entry sums checked at construction")
    }

    /// Iterations whose factor differs from the previous iteration's.
    #[must_use]
    pub fn switch_points(&self) -> Vec<usize> {
        let factors = self.expand();
        (1..factors.len()).filter(|&k| factors[k] != factors[k - 1]).collect()
    }

    /// True when the factor sequence is nonincreasing, i.e. model capacity
    /// only ever grows across the decode (e.g. 8 -> 4 -> 2 -> 1).
    #[must_use]
    pub fn is_scale_up(&self) -> bool {
        let factors = self.expand();
        factors.windows(2).all(|w| w[0] >= w[1])
    }

    /// Check every factor against the model's supported slicing factors.
    pub fn validate_factors(&self, supported: &[usize]) -> Result<()> {
        for e in &self.entries {
            if e.iterations > 0 && !supported.contains(&e.factor) {
                return Err(Error::Config(format!(
                    "schedule factor {} not among supported factors {supported:?}",
                    e.factor
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for DecodeSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for e in &self.entries {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "{}x{}", e.factor, e.iterations)?;
            first = false;
        }
        Ok(())
    }
}

// =============================================================================
// Sampler schedule
// =============================================================================

/// Default temperature-anneal intercept for categorical sampling.
pub const STEMP_BIAS: f64 = 0.5;
/// Default temperature-anneal slope for categorical sampling.
pub const STEMP_SCALE: f64 = 0.8;

/// Scalar sampling knobs for one decode run.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSchedule {
    /// Confidence-noise temperature multiplying the Gumbel term.
    pub mask_temp: f64,
    /// Classifier-free guidance scale; 0 disables guidance entirely.
    pub guidance_scale: f64,
    /// Guidance applies only to the final `guidance_last` iterations.
    pub guidance_last: usize,
    pub stemp_bias: f64,
    pub stemp_scale: f64,
}

impl SamplerSchedule {
    #[must_use]
    pub fn new(mask_temp: f64, guidance_scale: f64, guidance_last: usize) -> Self {
        SamplerSchedule {
            mask_temp,
            guidance_scale,
            guidance_last,
            stemp_bias: STEMP_BIAS,
            stemp_scale: STEMP_SCALE,
        }
    }

    /// Categorical sampling temperature at iteration `k`.
    #[must_use]
    pub fn sampling_temperature(&self, k: usize, k_total: usize) -> f64 {
        sampling_temperature(k, k_total, self.stemp_bias, self.stemp_scale)
    }

    /// Whether iteration `k` runs a guided (conditional + unconditional) pass.
    #[must_use]
    pub fn is_guided(&self, k: usize, k_total: usize) -> bool {
        self.guidance_scale != 0.0 && k + self.guidance_last >= k_total
    }
}

// =============================================================================
// Tests
// =============================================================================
