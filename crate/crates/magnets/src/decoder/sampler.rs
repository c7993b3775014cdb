//! Per-iteration sampling: guidance mixing, categorical draws, and
//! confidence-ranked commitment.
//!
//! RNG discipline: the caller hands in the iteration's stream; each masked
//! position derives its own substream keyed by grid position and draws in a
//! fixed order (categorical uniform, then Gumbel uniform). Randomness is
//! therefore a pure function of (seed, iteration, position), independent of
//! cache policy, guidance, and processing order.

use crate::error::{Error, Result};
use crate::numerics::{categorical_sample, gumbel_noise, to_f64, Real, Rng, Tensor};
use crate::schedules::{mask_ratio, SamplerSchedule};

/// Classifier-free guidance mix:
/// `cond + scale * lambda * (cond - uncond)`, elementwise.
pub fn apply_guidance<T: Real>(
    cond: &Tensor<T>,
    uncond: &Tensor<T>,
    scale: f64,
    lambda: f64,
) -> Result<Tensor<T>> {
    if cond.shape() != uncond.shape() {
        return Err(Error::Shape {
            op: "apply_guidance",
            detail: format!("{:?} vs {:?}", cond.shape(), uncond.shape()),
        });
    }
    let w = crate::numerics::real::<T>(scale * lambda);
    let mut out = cond.clone();
    for (o, u) in out.data_mut().iter_mut().zip(uncond.data()) {
        *o = *o + w * (*o - *u);
    }
    Ok(out)
}

/// Result of one sampling step over the masked positions.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    /// Sampled codebook id per masked position, aligned with the input order.
    pub sampled: Vec<u32>,
    /// Confidence score per masked position, aligned with the input order.
    pub confidence: Vec<f64>,
    /// Positions committed this iteration, ascending.
    pub committed: Vec<usize>,
}

/// Sample every masked position, then commit the `n_commit` most confident.
///
/// Each position draws a token from `softmax(logits / stemp(k))` and scores it
/// by the log-probability of the drawn id under the temperature-1 softmax,
/// plus `mask_temp * mask_ratio(k+1, K) * Gumbel` exploration noise (which
/// anneals to zero at the final iteration). Ties break toward the lowest
/// position. `logits` rows align with `positions`.
pub fn sample_step<T: Real>(
    logits: &Tensor<T>,
    positions: &[usize],
    k: usize,
    k_total: usize,
    n_commit: usize,
    sched: &SamplerSchedule,
    iter_rng: &Rng,
) -> Result<SampleOutcome> {
    if logits.shape().len() != 2 || logits.shape()[0] != positions.len() {
        return Err(Error::Shape {
            op: "sample_step",
            detail: format!("{} positions vs logits {:?}", positions.len(), logits.shape()),
        });
    }
    if n_commit > positions.len() {
        return Err(Error::Param(format!(
            "cannot commit {n_commit} of {} masked positions",
            positions.len()
        )));
    }
    let stemp = sched.sampling_temperature(k, k_total);
    let noise_scale = sched.mask_temp * mask_ratio(k + 1, k_total);

    let mut sampled = Vec::with_capacity(positions.len());
    let mut confidence = Vec::with_capacity(positions.len());
    for (i, &pos) in positions.iter().enumerate() {
        let mut pos_rng = iter_rng.substream(pos as u64);
        let row = logits.row(i);
        let id = categorical_sample(row, stemp, &mut pos_rng)?;
        let conf = log_softmax_at(row, id) + noise_scale * gumbel_noise(&mut pos_rng);
        sampled.push(id as u32);
        confidence.push(conf);
    }

    // Most confident first; ties commit the lowest grid position.
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| {
        confidence[b]
            .partial_cmp(&confidence[a])
            .expect("confidences are finite")
            .then_with(|| positions[a].cmp(&positions[b]))
    });
    let mut committed: Vec<usize> = order[..n_commit].iter().map(|&i| positions[i]).collect();
    committed.sort_unstable();

    Ok(SampleOutcome { sampled, confidence, committed })
}

/// Log-probability of index `id` under the temperature-1 softmax of `row`,
/// computed in f64 with a stable log-sum-exp.
fn log_softmax_at<T: Real>(row: &[T], id: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &v in row {
        m = m.max(to_f64(v));
    }
    let mut sum = 0.0;
    for &v in row {
        sum += (to_f64(v) - m).exp();
    }
    to_f64(row[id]) - m - sum.ln()
}

// =============================================================================
// Tests
// =============================================================================
