//! Per-layer key/value cache over committed grid positions.
//!
//! The cache never holds the class slot (it is re-processed every pass) and
//! never mixes slicing factors: entries are `[rows, num_heads * head_dim/p]`
//! for the factor that produced them, so a model switch must clear before the
//! new factor can cache. Rows are stored in commit order (ascending position
//! within one commit batch); attention consumes cached rows first, in stored
//! order, then the freshly processed rows.

use crate::error::{Error, Result};
use crate::numerics::Real;

/// One layer's cached or freshly produced key/value rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv<T> {
    /// `[rows, width]`, row-major.
    pub k: Vec<T>,
    /// `[rows, width]`, row-major.
    pub v: Vec<T>,
}

impl<T: Real> LayerKv<T> {
    fn empty() -> Self {
        LayerKv { k: Vec::new(), v: Vec::new() }
    }
}

/// Key/value rows produced by one forward pass, for its processed grid
/// positions (class slot excluded), positions ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct PassKv<T> {
    pub factor: usize,
    /// Row width: `num_heads * (head_dim / factor)`.
    pub width: usize,
    /// Ascending grid positions, aligned with the rows of each layer.
    pub positions: Vec<usize>,
    /// One entry per transformer layer.
    pub layers: Vec<LayerKv<T>>,
}

impl<T: Real> PassKv<T> {
    /// Row index of `position`, if this pass processed it.
    #[must_use]
    pub fn row_of(&self, position: usize) -> Option<usize> {
        self.positions.binary_search(&position).ok()
    }
}

/// KV cache for one decode stream.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    num_layers: usize,
    max_positions: usize,
    factor: Option<usize>,
    width: usize,
    positions: Vec<usize>,
    member: Vec<bool>,
    layers: Vec<LayerKv<T>>,
}

impl<T: Real> KvCache<T> {
    #[must_use]
    pub fn new(num_layers: usize, max_positions: usize) -> Self {
        KvCache {
            num_layers,
            max_positions,
            factor: None,
            width: 0,
            positions: Vec::new(),
            member: vec![false; max_positions],
            layers: (0..num_layers).map(|_| LayerKv::empty()).collect(),
        }
    }

    /// Cached position count.
    #[must_use]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Factor the cached rows were computed at; `None` when empty.
    #[must_use]
    pub fn factor(&self) -> Option<usize> {
        self.factor
    }

    /// Cached grid positions in storage (commit) order.
    #[must_use]
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    #[must_use]
    pub fn contains(&self, position: usize) -> bool {
        position < self.max_positions && self.member[position]
    }

    /// Drop every entry; the next extension may use any factor.
    pub fn clear(&mut self) {
        self.factor = None;
        self.width = 0;
        self.positions.clear();
        self.member.fill(false);
        for l in &mut self.layers {
            l.k.clear();
            l.v.clear();
        }
    }

    /// Append the selected positions' rows from a forward pass.
    ///
    /// Rows land in ascending position order. Errors: factor mismatch with
    /// existing entries, a selected position the pass did not process, or a
    /// position already cached.
    pub fn extend_from(&mut self, pass: &PassKv<T>, select: &[usize]) -> Result<()> {
        if select.is_empty() {
            return Ok(());
        }
        if pass.layers.len() != self.num_layers {
            return Err(Error::Cache(format!(
                "pass has {} layers, cache expects {}",
                pass.layers.len(),
                self.num_layers
            )));
        }
        match self.factor {
            Some(f) if f != pass.factor => {
                return Err(Error::Cache(format!(
                    "cache holds factor-{f} entries; cannot extend with factor-{} rows",
                    pass.factor
                )));
            }
            Some(_) => {}
            None => {
                self.factor = Some(pass.factor);
                self.width = pass.width;
            }
        }
        let mut chosen = select.to_vec();
        chosen.sort_unstable();
        chosen.dedup();
        if chosen.len() != select.len() {
            return Err(Error::Cache("duplicate positions in cache extension".into()));
        }
        for &pos in &chosen {
            if pos >= self.max_positions {
                return Err(Error::Cache(format!("position {pos} out of range")));
            }
            if self.member[pos] {
                return Err(Error::Cache(format!("position {pos} is already cached")));
            }
            if pass.row_of(pos).is_none() {
                return Err(Error::Cache(format!(
                    "position {pos} was not processed by the extending pass"
                )));
            }
        }
        let w = self.width;
        for &pos in &chosen {
            let row = pass.row_of(pos).expect("validated above");
            for (dst, src) in self.layers.iter_mut().zip(&pass.layers) {
                dst.k.extend_from_slice(&src.k[row * w..(row + 1) * w]);
                dst.v.extend_from_slice(&src.v[row * w..(row + 1) * w]);
            }
            self.positions.push(pos);
            self.member[pos] = true;
        }
        Ok(())
    }

    /// Row width of cached entries (0 when empty).
    #[must_use]
    pub fn width(&self) -> usize {
        self.width
    }

    pub(crate) fn layer(&self, l: usize) -> &LayerKv<T> {
        &self.layers[l]
    }
}

// =============================================================================
// Tests
// =============================================================================
