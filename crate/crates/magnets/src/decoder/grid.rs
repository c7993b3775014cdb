//! Token grids and their spatial bookkeeping.

use crate::error::{Error, Result};

use std::fmt;

/// Spatial layout of a token grid. Purely bookkeeping: decoding flattens
/// everything to positions `0..num_tokens()` in row-major (frame-major)
/// order; geometry shapes report emission only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Image { rows: usize, cols: usize },
    Video { frames: usize, rows: usize, cols: usize },
}

impl Geometry {
    #[must_use]
    pub fn num_tokens(&self) -> usize {
        match *self {
            Geometry::Image { rows, cols } => rows * cols,
            Geometry::Video { frames, rows, cols } => frames * rows * cols,
        }
    }

    /// Rows when flattened to a single raster (video stacks frames).
    #[must_use]
    pub fn flat_rows(&self) -> usize {
        match *self {
            Geometry::Image { rows, .. } => rows,
            Geometry::Video { frames, rows, .. } => frames * rows,
        }
    }

    #[must_use]
    pub fn cols(&self) -> usize {
        match *self {
            Geometry::Image { cols, .. } | Geometry::Video { cols, .. } => cols,
        }
    }

    /// Row/column (flattened) of a position.
    #[must_use]
    pub fn coords(&self, position: usize) -> (usize, usize) {
        (position / self.cols(), position % self.cols())
    }

    /// Parse `"16x16"` (image) or `"4x16x16"` (video).
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad geometry '{s}'")))?;
        let geo = match parts.as_slice() {
            [rows, cols] => Geometry::Image { rows: *rows, cols: *cols },
            [frames, rows, cols] => Geometry::Video { frames: *frames, rows: *rows, cols: *cols },
            _ => return Err(Error::Config(format!("geometry '{s}' must have 2 or 3 dims"))),
        };
        if geo.num_tokens() == 0 {
            return Err(Error::Config(format!("geometry '{s}' has zero tokens")));
        }
        Ok(geo)
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Geometry::Image { rows, cols } => write!(f, "{rows}x{cols}"),
            Geometry::Video { frames, rows, cols } => write!(f, "{frames}x{rows}x{cols}"),
        }
    }
}

/// A decoding grid: one token id per position, with the MASK sentinel marking
/// positions not yet decided. Committed positions never change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    geometry: Geometry,
    mask_token: u32,
    tokens: Vec<u32>,
}

impl TokenGrid {
    /// Fresh grid with every position masked.
    #[must_use]
    pub fn all_masked(geometry: Geometry, mask_token: u32) -> Self {
        TokenGrid { geometry, mask_token, tokens: vec![mask_token; geometry.num_tokens()] }
    }

    /// Wrap existing tokens; ids must be codebook ids (< mask) or MASK.
    pub fn new(geometry: Geometry, mask_token: u32, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != geometry.num_tokens() {
            return Err(Error::Input(format!(
                "token count {} does not match geometry {geometry}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t > mask_token) {
            return Err(Error::Input(format!("token id {bad} exceeds the MASK sentinel")));
        }
        Ok(TokenGrid { geometry, mask_token, tokens })
    }

    #[must_use]
    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    #[must_use]
    pub fn mask_token(&self) -> u32 {
        self.mask_token
    }

    #[must_use]
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[must_use]
    pub fn get(&self, position: usize) -> u32 {
        self.tokens[position]
    }

    #[must_use]
    pub fn is_masked(&self, position: usize) -> bool {
        self.tokens[position] == self.mask_token
    }

    /// Ascending positions still masked.
    #[must_use]
    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&p| self.is_masked(p)).collect()
    }

    /// Ascending positions already committed.
    #[must_use]
    pub fn committed_positions(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&p| !self.is_masked(p)).collect()
    }

    #[must_use]
    pub fn num_masked(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.mask_token).count()
    }

    /// Commit a codebook id to a masked position. Committed positions are
    /// final: recommitting (even the same id) is an error, as is committing
    /// the MASK sentinel itself.
    pub fn commit(&mut self, position: usize, id: u32) -> Result<()> {
        if position >= self.tokens.len() {
            return Err(Error::Input(format!("position {position} out of range")));
        }
        if id >= self.mask_token {
            return Err(Error::Input(format!("cannot commit non-codebook id {id}")));
        }
        if !self.is_masked(position) {
            return Err(Error::Input(format!(
                "position {position} is already committed; committed tokens never change"
            )));
        }
        self.tokens[position] = id;
        Ok(())
    }
}

// =============================================================================
// Tests
// =============================================================================

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_parse_and_display() {
        let img = Geometry::parse("16x16").unwrap();
        assert_eq!(img, Geometry::Image { rows: 16, cols: 16 });
        assert_eq!(img.num_tokens(), 256);
        assert_eq!(img.to_string(), "16x16");
        let vid = Geometry::parse("4x16x16").unwrap();
        assert_eq!(vid.num_tokens(), 1024);
        assert_eq!(vid.flat_rows(), 64);
        assert_eq!(vid.to_string(), "4x16x16");
        assert!(Geometry::parse("16").is_err());
        assert!(Geometry::parse("0x4").is_err());
        assert!(Geometry::parse("axb").is_err());
    }

    #[test]
    fn geometry_coords() {
        let g = Geometry::Image { rows: 4, cols: 4 };
        assert_eq!(g.coords(0), (0, 0));
        assert_eq!(g.coords(5), (1, 1));
        assert_eq!(g.coords(15), (3, 3));
    }

    #[test]
    fn grid_commit_lifecycle() {
        let g = Geometry::Image { rows: 2, cols: 2 };
        let mut grid = TokenGrid::all_masked(g, 16);
        assert_eq!(grid.num_masked(), 4);
        assert_eq!(grid.masked_positions(), vec![0, 1, 2, 3]);
        grid.commit(2, 7).unwrap();
        assert_eq!(grid.get(2), 7);
        assert!(!grid.is_masked(2));
        assert_eq!(grid.masked_positions(), vec![0, 1, 3]);
        assert_eq!(grid.committed_positions(), vec![2]);
        // Final: recommit and MASK commits both fail.
        assert!(grid.commit(2, 7).is_err());
        assert!(grid.commit(0, 16).is_err());
        assert!(grid.commit(9, 0).is_err());
    }

    #[test]
    fn grid_new_validates() {
        let g = Geometry::Image { rows: 2, cols: 2 };
        assert!(TokenGrid::new(g, 16, vec![0, 1, 2]).is_err());
        assert!(TokenGrid::new(g, 16, vec![0, 1, 2, 17]).is_err());
        let ok = TokenGrid::new(g, 16, vec![0, 16, 2, 3]).unwrap();
        assert_eq!(ok.num_masked(), 1);
    }
}
