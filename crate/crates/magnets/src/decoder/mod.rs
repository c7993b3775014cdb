//! Iterative parallel decoding.
//!
//! The decode loop starts from an all-mask grid (optionally with
//! pre-committed conditioning tokens), and per iteration: picks the scheduled
//! slicing factor, clears the KV caches on a factor switch or an explicit
//! refresh point, runs the sliced model over every position not yet cached,
//! optionally mixes in an unconditional stream for classifier-free guidance
//! over the final iterations, samples the masked positions, and irreversibly
//! commits the most confident ones. Committed positions' KV rows enter the
//! cache either from the pass that committed them (`Immediate`) or from the
//! following pass, where they were re-processed with their true ids
//! (`Lagged`).
//!
//! Randomness is a pure function of (seed, iteration, position), so runs at
//! equal seeds are comparable token-for-token across cache policies and
//! guidance windows.

mod grid;
mod sampler;
mod trace;

pub use grid::{Geometry, TokenGrid};
pub use sampler::{apply_guidance, sample_step, SampleOutcome};
pub use trace::{unmask_density, DecodeTrace, DensityMaps, TraceRow};

use crate::error::{Error, Result};
use crate::nested::{ForwardOutput, ForwardRequest, KvCache, NestedConfig, NestedWeights};
use crate::numerics::{Real, Rng, Tensor};
use crate::schedules::{guidance_lambda, masked_before, DecodeSchedule, SamplerSchedule};

/// Decoding family. `Baseline` is plain parallel decoding at one fixed model
/// size; `Magnets` allows a multi-size schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Magnets,
}

/// What the decode loop does with computed KV rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    /// Recompute everything every iteration.
    None,
    /// Cache committed positions; the cache is still cleared at factor
    /// switches because cached row widths are factor-specific.
    Cache,
    /// `Cache` plus explicit refresh points (`refresh_at`) that clear the
    /// cache mid-run even without a factor switch.
    CacheRefresh,
}

/// When a committed position's KV enters the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecacheTiming {
    /// From the pass that committed it (its input was still the mask
    /// embedding).
    Immediate,
    /// From the next pass, where it was re-processed with its true id.
    Lagged,
}

/// Run-level decoding configuration, excluding the model and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub seed: u64,
    pub variant: Variant,
    pub cache_policy: CachePolicy,
    pub recache_timing: RecacheTiming,
    pub sampler: SamplerSchedule,
    /// Extra cache-clear iterations (exclusive of 0 and K); requires
    /// `CacheRefresh`. Factor switches clear the cache regardless.
    pub refresh_at: Option<Vec<usize>>,
    /// Pre-committed `(position, id)` tokens, e.g. observed video frames.
    pub conditioning: Vec<(usize, u32)>,
}

impl SamplerConfig {
    /// Cached scheduled decoding with immediate re-caching and no extra
    /// refresh points.
    #[must_use]
    pub fn new(seed: u64, sampler: SamplerSchedule) -> Self {
        SamplerConfig {
            seed,
            variant: Variant::Magnets,
            cache_policy: CachePolicy::CacheRefresh,
            recache_timing: RecacheTiming::Immediate,
            sampler,
            refresh_at: None,
            conditioning: Vec::new(),
        }
    }
}

const UNCOMMITTED: usize = usize::MAX;

/// In-flight decode: one stream, strictly sequential over iterations.
pub struct DecodeState<'a, T> {
    weights: &'a NestedWeights<T>,
    config: &'a NestedConfig,
    schedule: DecodeSchedule,
    cfg: SamplerConfig,
    class_id: Option<u32>,
    grid: TokenGrid,
    rng: Rng,
    k: usize,
    cond_cache: KvCache<T>,
    uncond_cache: KvCache<T>,
    /// Iteration each position committed at (`UNCOMMITTED` while masked).
    commit_iteration: Vec<usize>,
    is_conditioning: Vec<bool>,
    force_refresh: bool,
    rows: Vec<TraceRow>,
}

impl<'a, T: Real> DecodeState<'a, T> {
    pub fn new(
        weights: &'a NestedWeights<T>,
        config: &'a NestedConfig,
        schedule: &DecodeSchedule,
        geometry: Geometry,
        class_id: Option<u32>,
        cfg: &SamplerConfig,
    ) -> Result<Self> {
        config.validate()?;
        schedule.validate_factors(&config.factors)?;
        let n = geometry.num_tokens();
        if n > config.max_positions {
            return Err(Error::Config(format!(
                "geometry {geometry} needs {n} positions; model supports {}",
                config.max_positions
            )));
        }
        if cfg.variant == Variant::Baseline && schedule.entries().len() > 1 {
            return Err(Error::Config(format!(
                "baseline decoding requires a single-size schedule, got {schedule}"
            )));
        }
        if let Some(points) = &cfg.refresh_at {
            if cfg.cache_policy != CachePolicy::CacheRefresh {
                return Err(Error::Config(
                    "refresh_at requires cache_policy = CacheRefresh".into(),
                ));
            }
            for &r in points {
                if r == 0 || r >= schedule.k_total() {
                    return Err(Error::Config(format!(
                        "refresh point {r} outside (0, {})",
                        schedule.k_total()
                    )));
                }
            }
        }
        if let Some(c) = class_id {
            config.class_row(c)?;
        }

        let mut grid = TokenGrid::all_masked(geometry, config.mask_token());
        let mut commit_iteration = vec![UNCOMMITTED; n];
        let mut is_conditioning = vec![false; n];
        for &(pos, id) in &cfg.conditioning {
            grid.commit(pos, id)?;
            commit_iteration[pos] = 0;
            is_conditioning[pos] = true;
        }

        Ok(DecodeState {
            weights,
            config,
            schedule: schedule.clone(),
            cfg: cfg.clone(),
            class_id,
            grid,
            rng: Rng::new(cfg.seed),
            k: 0,
            cond_cache: KvCache::new(config.num_layers, n),
            uncond_cache: KvCache::new(config.num_layers, n),
            commit_iteration,
            is_conditioning,
            force_refresh: false,
            rows: Vec::new(),
        })
    }

    #[must_use]
    pub fn is_done(&self) -> bool {
        self.k == self.schedule.k_total()
    }

    /// Next iteration to run.
    #[must_use]
    pub fn iteration(&self) -> usize {
        self.k
    }

    #[must_use]
    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    #[must_use]
    pub fn trace_rows(&self) -> &[TraceRow] {
        &self.rows
    }

    /// Discard both streams' cached KV immediately; the next iteration
    /// re-processes every position and records a refresh.
    pub fn refresh_cache(&mut self) {
        self.cond_cache.clear();
        self.uncond_cache.clear();
        self.force_refresh = true;
    }

    /// Conditional-stream logits at the currently masked positions, without
    /// advancing the decode or touching the caches.
    pub fn forward_masked(&self) -> Result<(Vec<usize>, Tensor<T>)> {
        if self.is_done() {
            return Err(Error::Input("decode already finished".into()));
        }
        let factor = self.schedule.factor_at(self.k);
        let out = self.run_stream(factor, self.class_id, &self.cond_cache)?;
        self.gather_masked(&out)
    }

    /// Run one decoding iteration.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(Error::Input("decode already finished".into()));
        }
        let k = self.k;
        let k_total = self.schedule.k_total();
        let factor = self.schedule.factor_at(k);
        let caching = self.cfg.cache_policy != CachePolicy::None;

        let switch = k > 0 && self.schedule.factor_at(k - 1) != factor;
        let at_refresh_point = self
            .cfg
            .refresh_at
            .as_ref()
            .is_some_and(|points| points.contains(&k));
        let refreshed = caching && k > 0 && (switch || at_refresh_point || self.force_refresh);
        self.force_refresh = false;
        if refreshed {
            self.cond_cache.clear();
            self.uncond_cache.clear();
        }

        let cached = self.cond_cache.len();
        let out_c = self.run_stream(factor, self.class_id, &self.cond_cache)?;
        let processed = out_c.kv.positions.len() + 1;
        let (masked, cond_logits) = self.gather_masked(&out_c)?;

        let guided = self.cfg.sampler.is_guided(k, k_total);
        let out_u = if guided {
            Some(self.run_stream(factor, None, &self.uncond_cache)?)
        } else {
            None
        };
        let logits = match &out_u {
            Some(u) => {
                let (_, uncond_logits) = self.gather_masked(u)?;
                apply_guidance(
                    &cond_logits,
                    &uncond_logits,
                    self.cfg.sampler.guidance_scale,
                    guidance_lambda(k, k_total),
                )?
            }
            None => cond_logits,
        };

        // Commit count from what actually remains masked: hit the cosine
        // target for the next iteration, at least one per iteration, all on
        // the last.
        let n_pool = self.grid.len() - self.cfg.conditioning.len();
        let target_after = masked_before(k + 1, k_total, n_pool);
        let n_commit = masked.len().saturating_sub(target_after).max(1).min(masked.len());

        let iter_rng = self.rng.substream(k as u64);
        let outcome =
            sample_step(&logits, &masked, k, k_total, n_commit, &self.cfg.sampler, &iter_rng)?;
        for &pos in &outcome.committed {
            let row = masked.binary_search(&pos).expect("committed positions are masked");
            self.grid.commit(pos, outcome.sampled[row])?;
            self.commit_iteration[pos] = k;
        }

        if caching {
            // Positions whose commit status has aged past the re-cache
            // cutoff join the cache from this pass's KV rows.
            let cutoff = match self.cfg.recache_timing {
                RecacheTiming::Immediate => Some(k),
                RecacheTiming::Lagged => k.checked_sub(1),
            };
            let select = self.cacheable(cutoff, &self.cond_cache);
            self.cond_cache.extend_from(&out_c.kv, &select)?;
            if let Some(u) = &out_u {
                let select_u = self.cacheable(cutoff, &self.uncond_cache);
                self.uncond_cache.extend_from(&u.kv, &select_u)?;
            }
        }

        self.rows.push(TraceRow {
            iteration: k,
            factor,
            cached,
            processed,
            committed: outcome.committed.len(),
            refreshed,
        });
        self.k += 1;
        Ok(())
    }

    /// Consume the finished decode into its grid and trace.
    pub fn finish(self) -> Result<(TokenGrid, DecodeTrace)> {
        if !self.is_done() {
            return Err(Error::Input(format!(
                "decode stopped at iteration {} of {}",
                self.k,
                self.schedule.k_total()
            )));
        }
        let trace = DecodeTrace {
            rows: self.rows,
            commit_iteration: self.commit_iteration,
            geometry: self.grid.geometry(),
        };
        Ok((self.grid, trace))
    }

    /// Forward one stream over every position absent from its cache.
    fn run_stream(
        &self,
        factor: usize,
        class_id: Option<u32>,
        cache: &KvCache<T>,
    ) -> Result<ForwardOutput<T>> {
        let request: Vec<(usize, u32)> = (0..self.grid.len())
            .filter(|&p| !cache.contains(p))
            .map(|p| (p, self.grid.get(p)))
            .collect();
        let model = self.weights.slice_view(self.config, factor)?;
        model.forward(&ForwardRequest { grid: &request, class_id }, cache)
    }

    /// Masked positions (ascending) and their logit rows from a pass.
    fn gather_masked(&self, out: &ForwardOutput<T>) -> Result<(Vec<usize>, Tensor<T>)> {
        let v = self.config.vocab_size;
        let mut masked = Vec::new();
        let mut rows = Vec::new();
        for (i, &pos) in out.kv.positions.iter().enumerate() {
            if self.grid.is_masked(pos) {
                masked.push(pos);
                rows.extend_from_slice(&out.logits.data()[i * v..(i + 1) * v]);
            }
        }
        let logits = Tensor::new(rows, vec![masked.len(), v])?;
        Ok((masked, logits))
    }

    /// Uncached positions already committed at or before `cutoff`
    /// (conditioning counts as committed before the run).
    fn cacheable(&self, cutoff: Option<usize>, cache: &KvCache<T>) -> Vec<usize> {
        (0..self.grid.len())
            .filter(|&p| {
                !cache.contains(p)
                    && (self.is_conditioning[p]
                        || cutoff.is_some_and(|c| self.commit_iteration[p] <= c))
            })
            .collect()
    }
}

/// Decode one grid to completion.
pub fn decode<T: Real>(
    weights: &NestedWeights<T>,
    config: &NestedConfig,
    schedule: &DecodeSchedule,
    geometry: Geometry,
    class_id: Option<u32>,
    cfg: &SamplerConfig,
) -> Result<(TokenGrid, DecodeTrace)> {
    let mut state = DecodeState::new(weights, config, schedule, geometry, class_id, cfg)?;
    while !state.is_done() {
        state.step()?;
    }
    state.finish()
}
