//! Plain-text and CSV report rendering for decode outputs.
//!
//! Everything here builds strings; writing them is the caller's concern.
//! Numeric columns use fixed formatting so goldens diff cleanly.

use std::fmt::Write as _;

use crate::decoder::{DecodeTrace, TokenGrid};
use crate::error::{Error, Result};

/// One CSV row per decoded sample: sample index, class, then the flattened
/// token grid in position order.
pub fn grids_csv(grids: &[(u32, TokenGrid)]) -> Result<String> {
    let n = match grids.first() {
        Some((_, g)) => g.len(),
        None => return Err(Error::Input("no grids to render".into())),
    };
    let mut s = String::from("sample,class");
    for p in 0..n {
        let _ = write!(s, ",p{p}");
    }
    s.push('\n');
    for (i, (class, grid)) in grids.iter().enumerate() {
        if grid.len() != n {
            return Err(Error::Input(format!(
                "grid {i} has {} tokens, expected {n}",
                grid.len()
            )));
        }
        let _ = write!(s, "{i},{class}");
        for p in 0..n {
            let _ = write!(s, ",{}", grid.get(p));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Aligned per-iteration table of one decode.
#[must_use]
pub fn trace_text(trace: &DecodeTrace) -> String {
    let mut s = format!(
        "geometry {} | {} iterations | {} tokens committed\n",
        trace.geometry,
        trace.k_total(),
        trace.total_committed()
    );
    let _ = writeln!(s, "{:>4} {:>6} {:>6} {:>9} {:>9} {:>9}", "iter", "factor", "cached", "processed", "committed", "refreshed");
    for r in &trace.rows {
        let _ = writeln!(
            s,
            "{:>4} {:>6} {:>6} {:>9} {:>9} {:>9}",
            r.iteration,
            r.factor,
            r.cached,
            r.processed,
            r.committed,
            if r.refreshed { "yes" } else { "-" }
        );
    }
    s
}

/// Per-level held-out NLL table, one row per slicing factor.
#[must_use]
pub fn nll_table(rows: &[(usize, f64)], oracle: Option<f64>) -> String {
    let mut s = String::new();
    if let Some(h) = oracle {
        let _ = writeln!(s, "source conditional entropy {h:.6}");
    }
    let _ = writeln!(s, "{:>6} {:>10}", "factor", "nll");
    for &(factor, nll) in rows {
        let _ = writeln!(s, "{factor:>6} {nll:>10.6}");
    }
    s
}
