//! Synthetic class-conditional token source with a closed-form oracle.
//!
//! Grids are first-order Markov chains over raster order: the first token is
//! uniform over the codebook, every later token draws from a per-class
//! transition row. Because the generating distribution is known exactly, the
//! source doubles as an evaluation oracle: for a suffix mask starting at
//! position `j`, the best achievable prediction NLL at `j` is the entropy of
//! the transition row out of the visible token at `j - 1`, and its
//! expectation over grids and mask starts is computable in closed form from
//! the transition matrices alone.

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Logit spread for transition rows. Rows are `softmax(ROW_LOGIT_STD * z)`
/// with `z ~ N(0, I)`; larger spread sharpens rows, lowering oracle entropy.
pub const ROW_LOGIT_STD: f64 = 2.0;

/// Minimum infinity-norm distance required between two classes' matrices.
const CLASS_DISTINCTNESS: f64 = 1e-3;

/// Class-conditional first-order Markov source over codebook ids.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    num_classes: usize,
    vocab: usize,
    /// Per class, row-major `[vocab, vocab]`; row `v` is the distribution of
    /// the token following `v`. Rows sum to 1.
    transitions: Vec<Vec<f64>>,
    seed: u64,
}

impl SyntheticSource {
    /// Build one transition matrix per class from the seed. Matrices are
    /// checked to be pairwise distinct so classes stay distinguishable.
    pub fn new(num_classes: usize, vocab: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Param("source needs at least one class".into()));
        }
        if vocab < 2 {
            return Err(Error::Param(format!("source vocab must be >= 2, got {vocab}")));
        }
        let root = Rng::new(seed);
        let mut transitions = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let mut rng = root.substream(c as u64);
            let mut matrix = vec![0.0; vocab * vocab];
            for row in matrix.chunks_mut(vocab) {
                let mut m = f64::NEG_INFINITY;
                for v in row.iter_mut() {
                    *v = ROW_LOGIT_STD * rng.next_normal();
                    m = m.max(*v);
                }
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            transitions.push(matrix);
        }
        for a in 0..num_classes {
            for b in a + 1..num_classes {
                let dist = transitions[a]
                    .iter()
                    .zip(&transitions[b])
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                if dist < CLASS_DISTINCTNESS {
                    return Err(Error::Config(format!(
                        "classes {a} and {b} drew indistinguishable transitions (seed {seed})"
                    )));
                }
            }
        }
        Ok(SyntheticSource { num_classes, vocab, transitions, seed })
    }

    #[must_use]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[must_use]
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    #[must_use]
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Distribution of the token following `prev` under class `class`.
    pub fn transition_row(&self, class: u32, prev: u32) -> Result<&[f64]> {
        if class as usize >= self.num_classes {
            return Err(Error::Input(format!(
                "class {class} out of range for {} classes",
                self.num_classes
            )));
        }
        if prev as usize >= self.vocab {
            return Err(Error::Input(format!(
                "token {prev} out of range for vocab {}",
                self.vocab
            )));
        }
        let v = self.vocab;
        Ok(&self.transitions[class as usize][prev as usize * v..(prev as usize + 1) * v])
    }

    /// Draw one grid of `n` tokens: uniform first token, then the chain.
    pub fn sample_grid(&self, class: u32, n: usize, rng: &mut Rng) -> Result<Vec<u32>> {
        if n == 0 {
            return Err(Error::Param("grid length must be positive".into()));
        }
        let mut out = Vec::with_capacity(n);
        let mut prev = rng.next_below(self.vocab as u64) as u32;
        out.push(prev);
        for _ in 1..n {
            let row = self.transition_row(class, prev)?;
            let u = rng.next_f64();
            let mut cum = 0.0;
            let mut pick = self.vocab - 1;
            for (i, &p) in row.iter().enumerate() {
                cum += p;
                if u < cum {
                    pick = i;
                    break;
                }
            }
            prev = pick as u32;
            out.push(prev);
        }
        Ok(out)
    }

    /// Exact expected NLL of the ideal predictor under the evaluation
    /// protocol: mask start `j` uniform in `[1, n)`, predict position `j`
    /// given the visible prefix. By the Markov property that conditional is
    /// the transition row out of `x_{j-1}`, so the expectation is the mean
    /// transition-row entropy weighted by the marginal of the previous token
    /// (`uniform * P^(j-1)`), averaged over `j` and over classes.
    pub fn conditional_entropy(&self, n: usize) -> Result<f64> {
        if n < 2 {
            return Err(Error::Param(format!(
                "conditional entropy needs a grid of >= 2 tokens, got {n}"
            )));
        }
        let v = self.vocab;
        let mut total = 0.0;
        for matrix in &self.transitions {
            let row_entropy: Vec<f64> = (0..v)
                .map(|r| {
                    matrix[r * v..(r + 1) * v]
                        .iter()
                        .filter(|&&p| p > 0.0)
                        .map(|&p| -p * p.ln())
                        .sum()
                })
                .collect();
            let mut marginal = vec![1.0 / v as f64; v];
            let mut acc = 0.0;
            for _j in 1..n {
                acc += marginal.iter().zip(&row_entropy).map(|(m, h)| m * h).sum::<f64>();
                let mut next = vec![0.0; v];
                for (r, &m) in marginal.iter().enumerate() {
                    for (c, nx) in next.iter_mut().enumerate() {
                        *nx += m * matrix[r * v + c];
                    }
                }
                marginal = next;
            }
            total += acc / (n - 1) as f64;
        }
        Ok(total / self.num_classes as f64)
    }
}

// =============================================================================
// Tests
// =============================================================================
