//! Hybrid blocked-CSR-COO sparse format with transpose indices.
//!
//! The primary encoding is blocked CSR: `row_offsets` over block rows plus a
//! block `col_indices` array, with every nonzero block stored as a dense
//! `block_size²` row-major tile, tiles laid out contiguously in BCSR order.
//! Two secondary structures ride along:
//!
//! * `row_indices` — the block row of every nonzero block (a COO mirror of
//!   the CSR part), so a kernel computing one output block can look up its
//!   coordinates from the storage index alone, with no search through
//!   `row_offsets`.
//! * `t_col_offsets` / `t_block_offsets` — the storage offsets of all blocks
//!   listed in transposed (column-major) order. Iterating a block column is
//!   one indirection through this secondary index; the values themselves are
//!   never copied or reordered.
//!
//! Offsets and indices are all block-wise, so the metadata cost per block is
//! a constant three entries regardless of `block_size`.

use std::sync::Arc;

use thiserror::Error;

use crate::dense::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("block_size must be positive")]
    ZeroBlockSize,

    #[error("duplicate block coordinate ({row}, {col})")]
    DuplicateBlock { row: usize, col: usize },

    #[error("block ({row}, {col}) out of range for a {n_block_rows}x{n_block_cols} block grid")]
    BlockOutOfRange {
        row: usize,
        col: usize,
        n_block_rows: usize,
        n_block_cols: usize,
    },

    #[error("value buffer holds {got} floats, topology needs {expected}")]
    ValueLength { expected: usize, got: usize },

    #[error("dense shape {got:?} does not match topology logical shape {expected:?}")]
    DenseShape {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid topology: {0}")]
    Invalid(String),
}

/// Block-grid sparsity pattern: BCSR offsets and column indices, the COO row
/// mirror, and the transposed-order secondary index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockTopology {
    block_size: usize,
    n_block_rows: usize,
    n_block_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    row_indices: Vec<usize>,
    t_col_offsets: Vec<usize>,
    t_block_offsets: Vec<usize>,
}

/// Storage offsets of all nonzero blocks in transposed (column-major) order,
/// plus per-block-column offsets into that list.
///
/// `col_indices` must come from a valid CSR layout (row-major block order).
/// Within each column the produced offsets are ascending, which means blocks
/// are visited sorted by `(column, row)`.
pub fn build_transpose_index(
    row_offsets: &[usize],
    col_indices: &[usize],
    n_block_cols: usize,
) -> (Vec<usize>, Vec<usize>) {
    let nnz = col_indices.len();
    let mut t_col_offsets = vec![0usize; n_block_cols + 1];
    for &c in col_indices {
        t_col_offsets[c + 1] += 1;
    }
    for c in 0..n_block_cols {
        t_col_offsets[c + 1] += t_col_offsets[c];
    }
    let mut cursor = t_col_offsets.clone();
    let mut t_block_offsets = vec![0usize; nnz];
    // Storage order is row-major, so blocks land in each column bucket in
    // ascending row order.
    let _ = row_offsets;
    for (storage_offset, &c) in col_indices.iter().enumerate() {
        t_block_offsets[cursor[c]] = storage_offset;
        cursor[c] += 1;
    }
    (t_col_offsets, t_block_offsets)
}

impl BlockTopology {
    /// Build a topology from a set of unique `(block_row, block_col)`
    /// coordinates. Coordinates may arrive in any order; storage order is
    /// always row-major across blocks.
    pub fn from_blocks(
        coords: &[(usize, usize)],
        n_block_rows: usize,
        n_block_cols: usize,
        block_size: usize,
    ) -> Result<Self, FormatError> {
        if block_size == 0 {
            return Err(FormatError::ZeroBlockSize);
        }
        for &(r, c) in coords {
            if r >= n_block_rows || c >= n_block_cols {
                return Err(FormatError::BlockOutOfRange {
                    row: r,
                    col: c,
                    n_block_rows,
                    n_block_cols,
                });
            }
        }
        let mut sorted: Vec<(usize, usize)> = coords.to_vec();
        sorted.sort_unstable();
        for pair in sorted.windows(2) {
            if pair[0] == pair[1] {
                return Err(FormatError::DuplicateBlock {
                    row: pair[0].0,
                    col: pair[0].1,
                });
            }
        }

        let mut row_offsets = vec![0usize; n_block_rows + 1];
        for &(r, _) in &sorted {
            row_offsets[r + 1] += 1;
        }
        for r in 0..n_block_rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        let col_indices: Vec<usize> = sorted.iter().map(|&(_, c)| c).collect();
        let row_indices: Vec<usize> = sorted.iter().map(|&(r, _)| r).collect();
        let (t_col_offsets, t_block_offsets) =
            build_transpose_index(&row_offsets, &col_indices, n_block_cols);

        Ok(Self {
            block_size,
            n_block_rows,
            n_block_cols,
            row_offsets,
            col_indices,
            row_indices,
            t_col_offsets,
            t_block_offsets,
        })
    }

    /// Fully dense block grid.
    pub fn dense(n_block_rows: usize, n_block_cols: usize, block_size: usize) -> Self {
        let mut coords = Vec::with_capacity(n_block_rows * n_block_cols);
        for r in 0..n_block_rows {
            for c in 0..n_block_cols {
                coords.push((r, c));
            }
        }
        Self::from_blocks(&coords, n_block_rows, n_block_cols, block_size)
            .expect("dense grid coordinates are always valid")
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_block_rows(&self) -> usize {
        self.n_block_rows
    }

    pub fn n_block_cols(&self) -> usize {
        self.n_block_cols
    }

    pub fn nnz_blocks(&self) -> usize {
        self.col_indices.len()
    }

    /// Shape of the matrix the topology describes, in elements.
    pub fn logical_shape(&self) -> (usize, usize) {
        (
            self.n_block_rows * self.block_size,
            self.n_block_cols * self.block_size,
        )
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn row_indices(&self) -> &[usize] {
        &self.row_indices
    }

    pub fn t_col_offsets(&self) -> &[usize] {
        &self.t_col_offsets
    }

    pub fn t_block_offsets(&self) -> &[usize] {
        &self.t_block_offsets
    }

    /// `(block_row, block_col)` of the block at a storage offset, via the COO
    /// mirror — one load each, no search.
    #[inline]
    pub fn block_coord(&self, storage_offset: usize) -> (usize, usize) {
        (
            self.row_indices[storage_offset],
            self.col_indices[storage_offset],
        )
    }

    /// Metadata entries stored per nonzero block (column index, row index,
    /// transpose offset). Constant by construction; exposed so tests can pin
    /// the overhead independent of `block_size`.
    pub fn metadata_entries_per_block(&self) -> usize {
        if self.nnz_blocks() == 0 {
            return 3;
        }
        (self.col_indices.len() + self.row_indices.len() + self.t_block_offsets.len())
            / self.nnz_blocks()
    }

    /// Check every structural invariant. Construction always produces a valid
    /// topology; this exists for property tests and fixture debugging.
    pub fn validate(&self) -> Result<(), FormatError> {
        let nnz = self.col_indices.len();
        let fail = |msg: String| Err(FormatError::Invalid(msg));

        if self.block_size == 0 {
            return Err(FormatError::ZeroBlockSize);
        }
        if self.row_offsets.len() != self.n_block_rows + 1 {
            return fail(format!("row_offsets length {}", self.row_offsets.len()));
        }
        if self.row_offsets[0] != 0 || self.row_offsets[self.n_block_rows] != nnz {
            return fail("row_offsets endpoints".into());
        }
        if self.row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return fail("row_offsets not nondecreasing".into());
        }
        if self.row_indices.len() != nnz || self.t_block_offsets.len() != nnz {
            return fail("secondary index length mismatch".into());
        }
        for r in 0..self.n_block_rows {
            let row = &self.col_indices[self.row_offsets[r]..self.row_offsets[r + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("col_indices not strictly increasing in row {r}"));
            }
            if row.iter().any(|&c| c >= self.n_block_cols) {
                return fail(format!("col index out of range in row {r}"));
            }
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                if self.row_indices[k] != r {
                    return fail(format!("row_indices[{k}] disagrees with CSR row {r}"));
                }
            }
        }
        if self.t_col_offsets.len() != self.n_block_cols + 1 {
            return fail("t_col_offsets length".into());
        }
        if self.t_col_offsets[0] != 0 || self.t_col_offsets[self.n_block_cols] != nnz {
            return fail("t_col_offsets endpoints".into());
        }
        // t_block_offsets must be a permutation of storage offsets that
        // visits blocks sorted by (column, row).
        let mut seen = vec![false; nnz];
        let mut prev: Option<(usize, usize)> = None;
        for c in 0..self.n_block_cols {
            if self.t_col_offsets[c] > self.t_col_offsets[c + 1] {
                return fail("t_col_offsets not nondecreasing".into());
            }
            for p in self.t_col_offsets[c]..self.t_col_offsets[c + 1] {
                let k = self.t_block_offsets[p];
                if k >= nnz || seen[k] {
                    return fail("t_block_offsets not a permutation".into());
                }
                seen[k] = true;
                if self.col_indices[k] != c {
                    return fail(format!("block {k} filed under wrong column {c}"));
                }
                let coord = (c, self.row_indices[k]);
                if let Some(prev) = prev {
                    if prev >= coord {
                        return fail("transposed traversal not sorted by (col, row)".into());
                    }
                }
                prev = Some(coord);
            }
        }
        Ok(())
    }

    /// Fixture format: one line per block, `row col storage_offset`, sorted
    /// by storage offset.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for k in 0..self.nnz_blocks() {
            out.push_str(&format!(
                "{} {} {}\n",
                self.row_indices[k], self.col_indices[k], k
            ));
        }
        out
    }
}

/// A [`BlockTopology`] plus the dense nonzero blocks, stored contiguously in
/// BCSR order, row-major within each block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseMatrix {
    topology: Arc<BlockTopology>,
    blocks: Vec<f64>,
}

impl BlockSparseMatrix {
    pub fn new(topology: Arc<BlockTopology>, blocks: Vec<f64>) -> Result<Self, FormatError> {
        let expected = topology.nnz_blocks() * topology.block_size() * topology.block_size();
        if blocks.len() != expected {
            return Err(FormatError::ValueLength {
                expected,
                got: blocks.len(),
            });
        }
        Ok(Self { topology, blocks })
    }

    pub fn zeros(topology: Arc<BlockTopology>) -> Self {
        let len = topology.nnz_blocks() * topology.block_size() * topology.block_size();
        Self {
            topology,
            blocks: vec![0.0; len],
        }
    }

    pub fn topology(&self) -> &Arc<BlockTopology> {
        &self.topology
    }

    pub fn blocks(&self) -> &[f64] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [f64] {
        &mut self.blocks
    }

    pub fn logical_shape(&self) -> (usize, usize) {
        self.topology.logical_shape()
    }

    /// The dense tile at a storage offset.
    #[inline]
    pub fn block(&self, storage_offset: usize) -> &[f64] {
        let area = self.topology.block_size() * self.topology.block_size();
        &self.blocks[storage_offset * area..(storage_offset + 1) * area]
    }

    /// Densify: zeros outside the nonzero blocks.
    pub fn to_dense(&self) -> DenseMatrix {
        let (rows, cols) = self.logical_shape();
        let bs = self.topology.block_size();
        let mut out = DenseMatrix::zeros(rows, cols);
        for k in 0..self.topology.nnz_blocks() {
            let (r, c) = self.topology.block_coord(k);
            let tile = self.block(k);
            for i in 0..bs {
                for j in 0..bs {
                    out.set(r * bs + i, c * bs + j, tile[i * bs + j]);
                }
            }
        }
        out
    }

    /// Densify the transpose by traversing the secondary index, without
    /// reordering stored values. Used by tests to pin transposed iteration
    /// against an explicit transpose.
    pub fn to_dense_transposed(&self) -> DenseMatrix {
        let (rows, cols) = self.logical_shape();
        let bs = self.topology.block_size();
        let mut out = DenseMatrix::zeros(cols, rows);
        for c in 0..self.topology.n_block_cols() {
            let lo = self.topology.t_col_offsets()[c];
            let hi = self.topology.t_col_offsets()[c + 1];
            for &k in &self.topology.t_block_offsets()[lo..hi] {
                let r = self.topology.row_indices()[k];
                let tile = self.block(k);
                for i in 0..bs {
                    for j in 0..bs {
                        out.set(c * bs + j, r * bs + i, tile[i * bs + j]);
                    }
                }
            }
        }
        out
    }

    /// Sample exactly the blocks of `topology` out of a dense matrix.
    pub fn from_dense(d: &DenseMatrix, topology: Arc<BlockTopology>) -> Result<Self, FormatError> {
        if d.shape() != topology.logical_shape() {
            return Err(FormatError::DenseShape {
                expected: topology.logical_shape(),
                got: d.shape(),
            });
        }
        let bs = topology.block_size();
        let mut blocks = Vec::with_capacity(topology.nnz_blocks() * bs * bs);
        for k in 0..topology.nnz_blocks() {
            let (r, c) = topology.block_coord(k);
            for i in 0..bs {
                for j in 0..bs {
                    blocks.push(d.at(r * bs + i, c * bs + j));
                }
            }
        }
        Ok(Self { topology, blocks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn topo(coords: &[(usize, usize)], rows: usize, cols: usize, bs: usize) -> BlockTopology {
        BlockTopology::from_blocks(coords, rows, cols, bs).unwrap()
    }

    #[test]
    fn empty_coords_give_all_zero_offsets() {
        let t = topo(&[], 3, 2, 4);
        assert_eq!(t.row_offsets(), &[0, 0, 0, 0]);
        assert_eq!(t.nnz_blocks(), 0);
        assert_eq!(t.t_col_offsets(), &[0, 0, 0]);
        t.validate().unwrap();
    }

    #[test]
    fn csr_arrays_match_fixture_on_2x3_grid() {
        let t = topo(&[(0, 0), (0, 2), (1, 1)], 2, 3, 2);
        assert_eq!(t.row_offsets(), &[0, 2, 3]);
        assert_eq!(t.col_indices(), &[0, 2, 1]);
        assert_eq!(t.row_indices(), &[0, 0, 1]);
    }

    #[test]
    fn transpose_index_matches_fixture_on_2x3_grid() {
        // Column-major visit order is (0,0), (1,1), (0,2) -> storage 0, 2, 1.
        let t = topo(&[(0, 0), (0, 2), (1, 1)], 2, 3, 2);
        assert_eq!(t.t_col_offsets(), &[0, 1, 2, 3]);
        assert_eq!(t.t_block_offsets(), &[0, 2, 1]);
        t.validate().unwrap();
    }

    #[test]
    fn block_diagonal_transpose_index_is_identity() {
        let t = topo(&[(0, 0), (1, 1), (2, 2)], 3, 3, 4);
        assert_eq!(t.t_block_offsets(), &[0, 1, 2]);
    }

    #[test]
    fn single_block_column_is_already_column_major() {
        let t = topo(&[(0, 0), (1, 0), (3, 0)], 4, 1, 2);
        assert_eq!(t.t_block_offsets(), &[0, 1, 2]);
    }

    #[test]
    fn transposed_traversal_matches_explicit_transpose_coords() {
        // 6x6 grid at ~40% density from a fixed pattern.
        let mut coords = Vec::new();
        let mut state = 0xfeed_beef_u64;
        for r in 0..6 {
            for c in 0..6 {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                if state >> 62 >= 2 {
                    continue;
                }
                coords.push((r, c));
            }
        }
        let t = topo(&coords, 6, 6, 2);

        // Independent oracle: coordinates of the explicit transpose in its
        // own row-major (i.e. original column-major) order.
        let mut transposed: Vec<(usize, usize)> = coords.iter().map(|&(r, c)| (c, r)).collect();
        transposed.sort_unstable();

        let mut visited = Vec::new();
        for c in 0..t.n_block_cols() {
            for p in t.t_col_offsets()[c]..t.t_col_offsets()[c + 1] {
                let k = t.t_block_offsets()[p];
                visited.push((t.col_indices()[k], t.row_indices()[k]));
            }
        }
        assert_eq!(visited, transposed);
    }

    #[test]
    fn duplicate_and_out_of_range_coords_are_rejected() {
        let dup = BlockTopology::from_blocks(&[(0, 0), (0, 0)], 2, 2, 2);
        assert_eq!(
            dup.unwrap_err(),
            FormatError::DuplicateBlock { row: 0, col: 0 }
        );
        let oob = BlockTopology::from_blocks(&[(2, 0)], 2, 2, 2);
        assert!(matches!(
            oob.unwrap_err(),
            FormatError::BlockOutOfRange { .. }
        ));
    }

    #[test]
    fn metadata_overhead_is_three_entries_per_block_for_any_block_size() {
        for bs in [1, 2, 4, 8, 128] {
            let t = topo(&[(0, 1), (1, 0), (1, 1)], 2, 2, bs);
            assert_eq!(t.metadata_entries_per_block(), 3);
        }
    }

    #[test]
    fn dump_lists_blocks_by_storage_offset() {
        let t = topo(&[(0, 0), (0, 2), (1, 1)], 2, 3, 2);
        assert_eq!(t.dump(), "0 0 0\n0 2 1\n1 1 2\n");
    }

    #[test]
    fn empty_topology_densifies_to_zero_matrix() {
        let t = Arc::new(topo(&[], 2, 2, 2));
        let s = BlockSparseMatrix::zeros(t);
        let d = s.to_dense();
        assert!(d.data().iter().all(|&v| v == 0.0));
        assert_eq!(d.shape(), (4, 4));
    }

    #[test]
    fn from_dense_masks_blocks_outside_topology() {
        let t = Arc::new(topo(&[(1, 0)], 2, 2, 2));
        let dense = DenseMatrix::from_fn(4, 4, |r, c| (r * 4 + c) as f64 + 1.0);
        let s = BlockSparseMatrix::from_dense(&dense, t).unwrap();
        let back = s.to_dense();
        for r in 0..4 {
            for c in 0..4 {
                let in_block = r >= 2 && c < 2;
                assert_eq!(back.at(r, c), if in_block { dense.at(r, c) } else { 0.0 });
            }
        }
    }

    #[test]
    fn from_dense_shape_mismatch_is_an_error() {
        let t = Arc::new(topo(&[(0, 0)], 2, 2, 2));
        let err = BlockSparseMatrix::from_dense(&DenseMatrix::zeros(4, 6), t).unwrap_err();
        assert!(matches!(err, FormatError::DenseShape { .. }));
    }

    proptest! {
        #[test]
        fn random_topologies_satisfy_all_invariants(
            mask in proptest::collection::vec(any::<bool>(), 1..=36),
            bs in prop_oneof![Just(1usize), Just(2), Just(4), Just(8)],
        ) {
            let cols = 6usize;
            let rows = mask.len().div_ceil(cols);
            let coords: Vec<(usize, usize)> = mask
                .iter()
                .enumerate()
                .filter(|&(_, &keep)| keep)
                .map(|(i, _)| (i / cols, i % cols))
                .collect();
            let t = topo(&coords, rows, cols, bs);
            prop_assert!(t.validate().is_ok());

            // Row and column block counts both total nnz.
            let by_rows: usize = t.row_offsets().windows(2).map(|w| w[1] - w[0]).sum();
            let by_cols: usize = t.t_col_offsets().windows(2).map(|w| w[1] - w[0]).sum();
            prop_assert_eq!(by_rows, t.nnz_blocks());
            prop_assert_eq!(by_cols, t.nnz_blocks());
        }

        #[test]
        fn dense_roundtrip_is_bitwise_and_transposed_view_matches(
            mask in proptest::collection::vec(any::<bool>(), 1..=25),
            bs in prop_oneof![Just(1usize), Just(2), Just(3)],
            seed in any::<u64>(),
        ) {
            let cols = 5usize;
            let rows = mask.len().div_ceil(cols);
            let coords: Vec<(usize, usize)> = mask
                .iter()
                .enumerate()
                .filter(|&(_, &keep)| keep)
                .map(|(i, _)| (i / cols, i % cols))
                .collect();
            let t = Arc::new(topo(&coords, rows, cols, bs));
            let mut state = seed | 1;
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((state >> 11) as f64) / (1u64 << 53) as f64 - 0.5
            };
            let n = t.nnz_blocks() * bs * bs;
            let values: Vec<f64> = (0..n).map(|_| next()).collect();
            let s = BlockSparseMatrix::new(t.clone(), values).unwrap();

            let round = BlockSparseMatrix::from_dense(&s.to_dense(), t).unwrap();
            prop_assert_eq!(round.blocks(), s.blocks());

            let via_index = s.to_dense_transposed();
            let explicit = s.to_dense().transposed();
            prop_assert_eq!(via_index.data(), explicit.data());
        }
    }
}
