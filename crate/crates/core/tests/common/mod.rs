#![allow(dead_code)] // each test binary uses its own subset

//! Shared generators for randomized integration tests. Everything is seeded
//! through `rng::Stream`, so failures reproduce from the printed case seed.

use std::sync::Arc;

use blockmoe::bcsr::{BlockSparseMatrix, BlockTopology};
use blockmoe::dense::DenseMatrix;
use blockmoe::rng::Stream;

pub fn random_matrix(s: &mut Stream, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| s.symmetric())
}

/// Random topology on an `n_block_rows × n_block_cols` grid with roughly the
/// given block density (at least one block when density > 0).
pub fn random_topology(
    s: &mut Stream,
    n_block_rows: usize,
    n_block_cols: usize,
    block_size: usize,
    density: f64,
) -> Arc<BlockTopology> {
    let mut coords = Vec::new();
    for r in 0..n_block_rows {
        for c in 0..n_block_cols {
            if s.uniform() < density {
                coords.push((r, c));
            }
        }
    }
    if coords.is_empty() && density > 0.0 && n_block_rows * n_block_cols > 0 {
        coords.push((s.below(n_block_rows.max(1)), s.below(n_block_cols.max(1))));
    }
    Arc::new(BlockTopology::from_blocks(&coords, n_block_rows, n_block_cols, block_size).unwrap())
}

pub fn random_sparse(s: &mut Stream, topology: Arc<BlockTopology>) -> BlockSparseMatrix {
    let len = topology.nnz_blocks() * topology.block_size() * topology.block_size();
    let values: Vec<f64> = (0..len).map(|_| s.symmetric()).collect();
    BlockSparseMatrix::new(topology, values).unwrap()
}
