//! Contiguous block masks over nodes and adjacency entries.
//!
//! Each timestep gets `K` independent masks. A node mask hides one
//! contiguous run of node indices (no wrap-around); an adjacency mask
//! hides a rectangle `I₁×I₂` of entries, with `|I₁| = |I₂|` but the two
//! ranges drawn independently. The *context* input zeroes everything
//! hidden by *any* mask (the intersection of the per-mask keep
//! patterns); the *target* for mask `k` is the complement restricted to
//! block `k`. A resampling guard keeps at least one node and one
//! adjacency entry visible in the context.

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("alpha range ({0}, {1}) invalid: need 0 < α_min < α_max < 1")]
    BadAlphaRange(f64, f64),
    #[error("⌊α_min·N⌋ = 0: N = {n} too small for α_min = {alpha_min}")]
    BlockTooSmall { n: usize, alpha_min: f64 },
    #[error("could not sample a mask set leaving context visible after {0} attempts")]
    ImpossibleContext(usize),
    #[error("mask range [{lo}, {hi}) out of bounds for {n} rows")]
    OutOfBounds { lo: usize, hi: usize, n: usize },
    #[error("input has {found} rows, masks were sampled for {expected}")]
    DimMismatch { expected: usize, found: usize },
}

const MAX_RESAMPLE_ATTEMPTS: usize = 100;

/// Masked block length for a given ratio.
pub fn block_length(alpha: f64, n: usize) -> usize {
    (alpha * n as f64).floor() as usize
}

/// One contiguous run of masked node indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeBlockMask {
    /// Half-open masked range `[lo, hi)`.
    pub lo: usize,
    pub hi: usize,
    /// The ratio the block length was derived from.
    pub ratio: f64,
}

impl NodeBlockMask {
    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.lo == self.hi
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.lo..self.hi).contains(&i)
    }

    /// `N×1` column with 1 on the masked block, 0 elsewhere.
    pub fn indicator_column(&self, n: usize) -> Array2<f64> {
        let mut col = Array2::zeros((n, 1));
        for i in self.lo..self.hi {
            col[(i, 0)] = 1.0;
        }
        col
    }
}

/// One masked rectangle of adjacency entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjBlockMask {
    /// Masked row range `[row_lo, row_hi)`.
    pub row_lo: usize,
    pub row_hi: usize,
    /// Masked column range `[col_lo, col_hi)`; same cardinality as the
    /// row range but positioned independently.
    pub col_lo: usize,
    pub col_hi: usize,
    pub ratio: f64,
}

impl AdjBlockMask {
    pub fn side(&self) -> usize {
        self.row_hi - self.row_lo
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.row_lo..self.row_hi).contains(&i) && (self.col_lo..self.col_hi).contains(&j)
    }

    /// `N×N` matrix with 1 inside the masked rectangle.
    pub fn indicator(&self, n: usize) -> Array2<f64> {
        let mut m = Array2::zeros((n, n));
        for i in self.row_lo..self.row_hi {
            for j in self.col_lo..self.col_hi {
                m[(i, j)] = 1.0;
            }
        }
        m
    }
}

/// The `K` node masks and `K` adjacency masks of one timestep.
#[derive(Clone, Debug)]
pub struct BlockMaskSet {
    pub timestep: usize,
    pub n: usize,
    pub node_masks: Vec<NodeBlockMask>,
    pub adj_masks: Vec<AdjBlockMask>,
}

impl BlockMaskSet {
    pub fn k(&self) -> usize {
        self.node_masks.len()
    }
}

/// Sample `K` node masks and `K` adjacency masks with fresh ratios
/// `α ~ U(α_min, α_max)` each, block starts uniform over feasible
/// positions. Resamples (up to 100 times) if the union of node blocks
/// covers every node, or the union of rectangles covers every adjacency
/// entry.
pub fn sample_mask_set(
    n: usize,
    k: usize,
    alpha_min: f64,
    alpha_max: f64,
    timestep: usize,
    rng: &mut impl Rng,
) -> Result<BlockMaskSet, MaskError> {
    if !(alpha_min > 0.0 && alpha_min < alpha_max && alpha_max < 1.0) {
        return Err(MaskError::BadAlphaRange(alpha_min, alpha_max));
    }
    if block_length(alpha_min, n) == 0 {
        return Err(MaskError::BlockTooSmall { n, alpha_min });
    }
    assert!(k >= 1, "at least one mask required");

    let node_masks = sample_until(rng, |rng| {
        let masks: Vec<NodeBlockMask> =
            (0..k).map(|_| sample_node_mask(n, alpha_min, alpha_max, rng)).collect();
        let covered = (0..n).all(|i| masks.iter().any(|m| m.contains(i)));
        (!covered).then_some(masks)
    })?;

    let adj_masks = sample_until(rng, |rng| {
        let masks: Vec<AdjBlockMask> =
            (0..k).map(|_| sample_adj_mask(n, alpha_min, alpha_max, rng)).collect();
        let area: usize = masks.iter().map(|m| m.side() * m.side()).sum();
        // Cheap sufficient test first; exact check only when the total
        // area could possibly tile the full matrix.
        let covered = area >= n * n
            && (0..n).all(|i| (0..n).all(|j| masks.iter().any(|m| m.contains(i, j))));
        (!covered).then_some(masks)
    })?;

    Ok(BlockMaskSet { timestep, n, node_masks, adj_masks })
}

fn sample_until<T, R: Rng>(
    rng: &mut R,
    mut attempt: impl FnMut(&mut R) -> Option<T>,
) -> Result<T, MaskError> {
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        if let Some(v) = attempt(rng) {
            return Ok(v);
        }
    }
    Err(MaskError::ImpossibleContext(MAX_RESAMPLE_ATTEMPTS))
}

fn sample_node_mask(n: usize, alpha_min: f64, alpha_max: f64, rng: &mut impl Rng) -> NodeBlockMask {
    let ratio = rng.random_range(alpha_min..alpha_max);
    let len = block_length(ratio, n);
    let lo = rng.random_range(0..=n - len);
    NodeBlockMask { lo, hi: lo + len, ratio }
}

fn sample_adj_mask(n: usize, alpha_min: f64, alpha_max: f64, rng: &mut impl Rng) -> AdjBlockMask {
    let ratio = rng.random_range(alpha_min..alpha_max);
    let side = block_length(ratio, n);
    let row_lo = rng.random_range(0..=n - side);
    let col_lo = rng.random_range(0..=n - side);
    AdjBlockMask { row_lo, row_hi: row_lo + side, col_lo, col_hi: col_lo + side, ratio }
}

fn check_rows(expected: usize, found: usize) -> Result<(), MaskError> {
    if expected != found {
        return Err(MaskError::DimMismatch { expected, found });
    }
    Ok(())
}

/// Context node features: every row hidden by *any* mask is zeroed
/// (the Hadamard product with the intersection of keep patterns).
pub fn apply_node_context(
    x: &Array2<f64>,
    masks: &BlockMaskSet,
) -> Result<Array2<f64>, MaskError> {
    check_rows(masks.n, x.nrows())?;
    let mut out = x.clone();
    for mask in &masks.node_masks {
        for i in mask.lo..mask.hi {
            out.row_mut(i).fill(0.0);
        }
    }
    Ok(out)
}

/// Context adjacency: every entry inside *any* masked rectangle is
/// zeroed.
pub fn apply_adj_context(
    a: &Array2<f64>,
    masks: &BlockMaskSet,
) -> Result<Array2<f64>, MaskError> {
    check_rows(masks.n, a.nrows())?;
    check_rows(masks.n, a.ncols())?;
    let mut out = a.clone();
    for mask in &masks.adj_masks {
        for i in mask.row_lo..mask.row_hi {
            for j in mask.col_lo..mask.col_hi {
                out[(i, j)] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Restrict `z` to the rows of one masked block (everything else
/// zeroed): the reconstruction target for that mask.
pub fn target_rows(z: &Array2<f64>, mask: &NodeBlockMask, n: usize) -> Result<Array2<f64>, MaskError> {
    if mask.hi > n {
        return Err(MaskError::OutOfBounds { lo: mask.lo, hi: mask.hi, n });
    }
    check_rows(n, z.nrows())?;
    let mut out = Array2::zeros(z.raw_dim());
    for i in mask.lo..mask.hi {
        out.row_mut(i).assign(&z.row(i));
    }
    Ok(out)
}
