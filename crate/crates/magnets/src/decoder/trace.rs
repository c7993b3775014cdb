//! Decode traces and aggregate unmasking densities.

use crate::error::{Error, Result};

use super::grid::Geometry;

use std::fmt::Write as _;

/// Per-iteration record of one decode run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Slicing factor the iteration ran at.
    pub factor: usize,
    /// Conditional-stream cache rows entering the forward pass.
    pub cached: usize,
    /// Rows processed by the conditional forward pass (class slot included).
    pub processed: usize,
    /// Positions committed by this iteration's sampling.
    pub committed: usize,
    /// Whether the cache was cleared entering this iteration (model switch
    /// or explicit refresh point).
    pub refreshed: bool,
}

/// Full record of one decode: per-iteration rows plus, for every grid
/// position, the iteration at which it was committed (conditioning positions
/// count as iteration 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeTrace {
    pub rows: Vec<TraceRow>,
    pub commit_iteration: Vec<usize>,
    pub geometry: Geometry,
}

impl DecodeTrace {
    #[must_use]
    pub fn k_total(&self) -> usize {
        self.rows.len()
    }

    /// Commits summed over iterations (excludes conditioning).
    #[must_use]
    pub fn total_committed(&self) -> usize {
        self.rows.iter().map(|r| r.committed).sum()
    }

    /// CSV rendering, one line per iteration; booleans as 0/1.
    #[must_use]
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,factor,cached,processed,committed,refreshed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iteration,
                r.factor,
                r.cached,
                r.processed,
                r.committed,
                u8::from(r.refreshed)
            );
        }
        out
    }
}

/// Commit-time histograms over many decodes of one configuration.
///
/// `counts[k][pos]` is the number of runs that committed `pos` at iteration
/// `k`. Each run commits each position exactly once, so per-position counts
/// sum to the number of runs exactly; densities are `count / runs`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DensityMaps {
    pub geometry: Geometry,
    pub runs: usize,
    pub counts: Vec<Vec<u32>>,
}

impl DensityMaps {
    #[must_use]
    pub fn k_total(&self) -> usize {
        self.counts.len()
    }

    /// Fraction of runs committing `pos` at iteration `k`.
    #[must_use]
    pub fn density(&self, k: usize, pos: usize) -> f64 {
        self.counts[k][pos] as f64 / self.runs as f64
    }

    /// Long-form CSV: one line per (iteration, position).
    #[must_use]
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,position,row,col,count,density\n");
        for (k, grid) in self.counts.iter().enumerate() {
            for (pos, &c) in grid.iter().enumerate() {
                let (row, col) = self.geometry.coords(pos);
                let _ = writeln!(
                    out,
                    "{k},{pos},{row},{col},{c},{:.6}",
                    c as f64 / self.runs as f64
                );
            }
        }
        out
    }

    /// One iteration's density as an ASCII PGM (P2) image, densities scaled
    /// to `[0, 255]`. Video geometries stack frames vertically.
    #[must_use]
    pub fn to_pgm(&self, k: usize) -> String {
        let rows = self.geometry.flat_rows();
        let cols = self.geometry.cols();
        let mut out = format!("P2\n{cols} {rows}\n255\n");
        for r in 0..rows {
            for c in 0..cols {
                if c > 0 {
                    out.push(' ');
                }
                let d = self.density(k, r * cols + c);
                let _ = write!(out, "{}", (d * 255.0).round() as u32);
            }
            out.push('\n');
        }
        out
    }
}

/// Aggregate commit-time densities across decode traces.
///
/// All traces must share geometry and iteration count, and every position in
/// every trace must have been committed at some iteration.
pub fn unmask_density(traces: &[DecodeTrace]) -> Result<DensityMaps> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Input("unmask_density needs at least one trace".into()))?;
    let k_total = first.k_total();
    let geometry = first.geometry;
    let n = geometry.num_tokens();
    let mut counts = vec![vec![0u32; n]; k_total];
    for (i, t) in traces.iter().enumerate() {
        if t.geometry != geometry || t.k_total() != k_total {
            return Err(Error::Input(format!(
                "trace {i} has geometry {} over {} iterations; expected {geometry} over {k_total}",
                t.geometry,
                t.k_total()
            )));
        }
        if t.commit_iteration.len() != n {
            return Err(Error::Input(format!("trace {i} covers {} positions, expected {n}", t.commit_iteration.len())));
        }
        for (pos, &k) in t.commit_iteration.iter().enumerate() {
            if k >= k_total {
                return Err(Error::Input(format!(
                    "trace {i} position {pos} committed at iteration {k} >= {k_total}"
                )));
            }
            counts[k][pos] += 1;
        }
    }
    Ok(DensityMaps { geometry, runs: traces.len(), counts })
}

// =============================================================================
// Tests
// =============================================================================
