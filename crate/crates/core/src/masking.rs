//! Random masking of patch sequences and positional-encoding helpers.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Disjoint visible/masked index sets covering `0..n_total`.
///
/// Both lists are kept sorted ascending; `masked.len()` is
/// `floor(ratio * n_total)`, so at least one patch stays visible for any
/// ratio < 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPartition {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub n_total: usize,
}

impl MaskPartition {
    /// Everything visible, nothing masked.
    pub fn identity(n_total: usize) -> Self {
        MaskPartition {
            visible: (0..n_total).collect(),
            masked: Vec::new(),
            n_total,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n_total];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= self.n_total || seen[i] {
                return Err(Error::InvalidArg(format!(
                    "partition index {i} out of range or duplicated"
                )));
            }
            seen[i] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::InvalidArg("partition does not cover 0..n_total".into()));
        }
        Ok(())
    }
}

/// Draw a uniformly random masked subset of size `floor(ratio * n_total)`.
pub fn sample_mask(n_total: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskPartition> {
    if n_total < 2 {
        return Err(Error::InvalidArg(format!(
            "need at least 2 patches to mask, got {n_total}"
        )));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArg(format!(
            "mask ratio must be in [0, 1), got {ratio}"
        )));
    }
    let n_masked = (ratio * n_total as f64).floor() as usize;
    debug_assert!(n_masked <= n_total - 1);

    let mut indices: Vec<usize> = (0..n_total).collect();
    // Partial Fisher-Yates: the first n_masked entries are the masked set.
    for i in 0..n_masked {
        let j = rng.gen_range(i..n_total);
        indices.swap(i, j);
    }
    let mut masked: Vec<usize> = indices[..n_masked].to_vec();
    let mut visible: Vec<usize> = indices[n_masked..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPartition {
        visible,
        masked,
        n_total,
    })
}

/// Add one positional row per sequence element: `out[i] = x[i] + table[positions[i]]`.
pub fn add_positions(
    embeddings: &Array2<f64>,
    table: &Array2<f64>,
    positions: &[usize],
) -> Result<Array2<f64>> {
    if embeddings.nrows() != positions.len() {
        return Err(Error::Shape(format!(
            "{} embeddings but {} positions",
            embeddings.nrows(),
            positions.len()
        )));
    }
    if embeddings.ncols() != table.ncols() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs table dim {}",
            embeddings.ncols(),
            table.ncols()
        )));
    }
    let mut out = embeddings.clone();
    for (i, &p) in positions.iter().enumerate() {
        if p >= table.nrows() {
            return Err(Error::Shape(format!(
                "position {p} outside table of {} rows",
                table.nrows()
            )));
        }
        for c in 0..table.ncols() {
            out[[i, c]] += table[[p, c]];
        }
    }
    Ok(out)
}

/// Gather rows into (visible, masked), preserving the order of each index list.
pub fn split(
    sequence: &Array2<f64>,
    partition: &MaskPartition,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if sequence.nrows() != partition.n_total {
        return Err(Error::Shape(format!(
            "sequence has {} rows, partition expects {}",
            sequence.nrows(),
            partition.n_total
        )));
    }
    partition.validate()?;
    let gather = |idx: &[usize]| {
        let mut out = Array2::zeros((idx.len(), sequence.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&sequence.row(i));
        }
        out
    };
    Ok((gather(&partition.visible), gather(&partition.masked)))
}

/// Inverse of [`split`]: scatter visible/masked rows back to sequence order.
pub fn merge(
    visible: &Array2<f64>,
    masked: &Array2<f64>,
    partition: &MaskPartition,
) -> Result<Array2<f64>> {
    if visible.nrows() != partition.visible.len() || masked.nrows() != partition.masked.len() {
        return Err(Error::Shape("row counts do not match partition".into()));
    }
    let d = visible.ncols().max(masked.ncols());
    let mut out = Array2::zeros((partition.n_total, d));
    for (r, &i) in partition.visible.iter().enumerate() {
        out.row_mut(i).assign(&visible.row(r));
    }
    for (r, &i) in partition.masked.iter().enumerate() {
        out.row_mut(i).assign(&masked.row(r));
    }
    Ok(out)
}
