//! Randomized contextual sub-data sampling.
//!
//! The sinogram is partitioned into non-overlapping 2x2 blocks. Within a
//! block the four cells are indexed 0..=3 flattened along the view axis
//! first: 0=(view v, bin w), 1=(v, w+1), 2=(v+1, w), 3=(v+1, w+1). One
//! index `i` is drawn uniformly per block (stream `subdata/blocks`, blocks
//! visited row-major); slot s1 takes cell `i` and slots s2/s3 take the
//! contextually adjacent cells, in ascending index order:
//!
//! | i | s2, s3 | unused |
//! |---|--------|--------|
//! | 0 | 1, 2   | 3      |
//! | 1 | 0, 2   | 3      |
//! | 2 | 1, 3   | 0      |
//! | 3 | 1, 2   | 0      |
//!
//! At the boundary draws (i = 0 or 3) only same-side neighbours exist, so
//! the two nearest are taken. Exactly three of the four cells are used and
//! the unused index is a deterministic function of `i`.

use ndarray::Array2;
use rand::Rng;

use crate::error::{LdctError, Result};
use crate::geometry::Sinogram;

/// Neighbour slots (s2, s3) for a drawn index.
const SLOT_TABLE: [(u8, u8); 4] = [(1, 2), (0, 2), (1, 3), (1, 2)];

/// The six ordered sub-data pairs, as 1-based slot numbers.
pub const ORDERED_PAIRS: [(u8, u8); 6] = [(1, 2), (1, 3), (2, 1), (2, 3), (3, 1), (3, 2)];

/// Three half-resolution sub-sinograms plus their per-block provenance.
#[derive(Debug, Clone)]
pub struct SubDataSet {
    /// Sub-arrays for slots s1, s2, s3, each `H/2 x W/2`.
    pub slots: [Array2<f64>; 3],
    /// Per-block in-block cell index (0..=3) feeding each slot.
    pub provenance: [Array2<u8>; 3],
    pub rng_seed: u64,
}

impl SubDataSet {
    pub fn source_shape(&self) -> (usize, usize) {
        (self.slots[0].nrows() * 2, self.slots[0].ncols() * 2)
    }

    /// In-block index drawn for block `(by, bx)` (the s1 provenance).
    pub fn drawn_index(&self, by: usize, bx: usize) -> u8 {
        self.provenance[0][[by, bx]]
    }
}

fn cell_offset(index: u8) -> (usize, usize) {
    ((index / 2) as usize, (index % 2) as usize)
}

/// Draw a [`SubDataSet`] from a raw sinogram array. Dimensions must be even.
pub fn sample_subdata_array(data: &Array2<f64>, seed: u64) -> Result<SubDataSet> {
    let (h, w) = data.dim();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(LdctError::validation(format!(
            "sub-data sampling needs even dimensions, got {h}x{w}"
        )));
    }
    let (hh, hw) = (h / 2, w / 2);
    let mut rng = crate::rng::stream(seed, "subdata/blocks");
    let mut slots = [
        Array2::zeros((hh, hw)),
        Array2::zeros((hh, hw)),
        Array2::zeros((hh, hw)),
    ];
    let mut provenance = [
        Array2::zeros((hh, hw)),
        Array2::zeros((hh, hw)),
        Array2::zeros((hh, hw)),
    ];
    for by in 0..hh {
        for bx in 0..hw {
            let i: u8 = rng.random_range(0..4);
            let (a, b) = SLOT_TABLE[i as usize];
            for (slot, cell) in [i, a, b].into_iter().enumerate() {
                let (dy, dx) = cell_offset(cell);
                slots[slot][[by, bx]] = data[[2 * by + dy, 2 * bx + dx]];
                provenance[slot][[by, bx]] = cell;
            }
        }
    }
    Ok(SubDataSet {
        slots,
        provenance,
        rng_seed: seed,
    })
}

/// Draw a [`SubDataSet`] from a sinogram.
pub fn sample_subdata(sino: &Sinogram, seed: u64) -> Result<SubDataSet> {
    sample_subdata_array(&sino.data, seed)
}

/// Choose an ordered pair of distinct slots (1-based), uniform over the six
/// ordered pairs; deterministic under `seed` (stream `subdata/pair`).
pub fn choose_pair(sds: &SubDataSet, seed: u64) -> (u8, u8) {
    debug_assert!(!sds.slots[0].is_empty());
    let mut rng = crate::rng::stream(seed, "subdata/pair");
    ORDERED_PAIRS[rng.random_range(0..6usize)]
}

/// Gather `full` through the provenance of slot `k` (1-based). Applying it
/// to the original sinogram reproduces that slot bitwise.
pub fn subsample_like(full: &Array2<f64>, sds: &SubDataSet, k: u8) -> Result<Array2<f64>> {
    if !(1..=3).contains(&k) {
        return Err(LdctError::validation("slot index must be 1, 2, or 3"));
    }
    if full.dim() != sds.source_shape() {
        return Err(LdctError::validation(format!(
            "array shape {:?} does not match sub-data source {:?}",
            full.dim(),
            sds.source_shape()
        )));
    }
    let prov = &sds.provenance[(k - 1) as usize];
    Ok(Array2::from_shape_fn(prov.dim(), |(by, bx)| {
        let (dy, dx) = cell_offset(prov[[by, bx]]);
        full[[2 * by + dy, 2 * bx + dx]]
    }))
}
