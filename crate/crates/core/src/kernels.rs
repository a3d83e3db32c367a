//! The three-character block-sparse product family: SDD, DSD and DDS, named
//! output-left-right with S sparse and D dense, plus elementwise maps over
//! stored values.
//!
//! All transpose-flag combinations are supported. A transposed sparse operand
//! is never materialized: iteration goes through the topology's secondary
//! index (`t_col_offsets` / `t_block_offsets`) and reads the stored blocks in
//! place. Dense operands are likewise read through index arithmetic.
//!
//! Parallelism and determinism: the unit of work is one output block (SDD) or
//! one output tile row (DSD / DDS). Each output region is owned by exactly one
//! worker and every element's reduction runs in ascending inner-index order,
//! so results are bitwise identical for any worker count.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use crate::bcsr::{BlockSparseMatrix, BlockTopology};
use crate::dense::{activation_scalar, ActMode, ActivationKind, DenseMatrix, ShapeError};
use crate::parallel::for_each_chunk;

// Floating-point operation counter, two per multiply-accumulate, bumped once
// per block product actually computed. `with_flop_count` serializes readers
// so concurrent measurements cannot bleed into each other.
static FLOPS: AtomicU64 = AtomicU64::new(0);
static FLOP_READER: Mutex<()> = Mutex::new(());

#[inline]
fn add_flops(n: u64) {
    FLOPS.fetch_add(n, Ordering::Relaxed);
}

/// Run `f` and report the exact number of floating-point operations (counted
/// as 2 per multiply-add, at block-product granularity) the sparse kernels
/// performed while it ran.
pub fn with_flop_count<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let guard: MutexGuard<'_, ()> = FLOP_READER.lock().unwrap_or_else(|e| e.into_inner());
    FLOPS.store(0, Ordering::Relaxed);
    let out = f();
    let flops = FLOPS.load(Ordering::Relaxed);
    drop(guard);
    (out, flops)
}

fn check_inner(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(), ShapeError> {
    if a.1 != b.0 {
        return Err(ShapeError::new(op, a, b));
    }
    Ok(())
}

/// Sampled dense-dense product: `out[r,c] = (A_eff · B_eff)` evaluated only on
/// the blocks of `out_topology`.
///
/// Each output block finds its coordinates through the COO `row_indices`
/// mirror in O(1); blocks outside the topology are never computed.
pub fn sdd(
    a: &DenseMatrix,
    b: &DenseMatrix,
    out_topology: Arc<BlockTopology>,
    transpose_a: bool,
    transpose_b: bool,
) -> Result<BlockSparseMatrix, ShapeError> {
    let (m, ka) = a.shape_t(transpose_a);
    let (kb, n) = b.shape_t(transpose_b);
    check_inner("sdd", (m, ka), (kb, n))?;
    if (m, n) != out_topology.logical_shape() {
        return Err(ShapeError::new(
            "sdd output topology",
            (m, n),
            out_topology.logical_shape(),
        ));
    }

    let bs = out_topology.block_size();
    let area = bs * bs;
    let mut blocks = vec![0.0; out_topology.nnz_blocks() * area];
    let topo = &out_topology;
    for_each_chunk(&mut blocks, area, |storage_offset, tile| {
        let (r, c) = topo.block_coord(storage_offset);
        for i in 0..bs {
            let gi = r * bs + i;
            for j in 0..bs {
                let gj = c * bs + j;
                let mut acc = 0.0;
                for k in 0..ka {
                    acc += a.at_t(transpose_a, gi, k) * b.at_t(transpose_b, k, gj);
                }
                tile[i * bs + j] = acc;
            }
        }
        add_flops(2 * (area * ka) as u64);
    });

    BlockSparseMatrix::new(out_topology, blocks).map_err(|_| ShapeError::new("sdd", (m, n), (m, n)))
}

/// Sparse-dense product with dense output: `out = S_eff · B_eff`.
///
/// With `transpose_s` the block column lists of the secondary index drive the
/// iteration; stored values are read in place through one indirection.
pub fn dsd(
    s: &BlockSparseMatrix,
    b: &DenseMatrix,
    transpose_s: bool,
    transpose_b: bool,
) -> Result<DenseMatrix, ShapeError> {
    let topo = s.topology();
    let bs = topo.block_size();
    let (sm, sk) = topo.logical_shape();
    let (m, ks) = if transpose_s { (sk, sm) } else { (sm, sk) };
    let (kb, n) = b.shape_t(transpose_b);
    check_inner("dsd", (m, ks), (kb, n))?;

    let mut out = DenseMatrix::zeros(m, n);
    for_each_chunk(out.data_mut(), bs * n, |tile_row, rows| {
        if !transpose_s {
            let lo = topo.row_offsets()[tile_row];
            let hi = topo.row_offsets()[tile_row + 1];
            for k in lo..hi {
                let c = topo.col_indices()[k];
                let tile = s.block(k);
                for i in 0..bs {
                    for kk in 0..bs {
                        let v = tile[i * bs + kk];
                        let kg = c * bs + kk;
                        let row = &mut rows[i * n..(i + 1) * n];
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += v * b.at_t(transpose_b, kg, j);
                        }
                    }
                }
                add_flops(2 * (bs * bs * n) as u64);
            }
        } else {
            // Output tile row is block column `tile_row` of s; the secondary
            // index yields its blocks in ascending row order, which keeps the
            // inner reduction ascending in the contracted dimension.
            let lo = topo.t_col_offsets()[tile_row];
            let hi = topo.t_col_offsets()[tile_row + 1];
            for &k in &topo.t_block_offsets()[lo..hi] {
                let r = topo.row_indices()[k];
                let tile = s.block(k);
                for i in 0..bs {
                    for kk in 0..bs {
                        // s^T[tile_row*bs + i, r*bs + kk] is stored at (kk, i).
                        let v = tile[kk * bs + i];
                        let kg = r * bs + kk;
                        let row = &mut rows[i * n..(i + 1) * n];
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += v * b.at_t(transpose_b, kg, j);
                        }
                    }
                }
                add_flops(2 * (bs * bs * n) as u64);
            }
        }
    });
    Ok(out)
}

/// Dense-sparse product with dense output: `out = A_eff · S_eff`.
///
/// Mirrors [`dsd`] with the sparse operand on the right: the non-transposed
/// form iterates block columns through the secondary index, the transposed
/// form walks the CSR rows directly.
pub fn dds(
    a: &DenseMatrix,
    s: &BlockSparseMatrix,
    transpose_a: bool,
    transpose_s: bool,
) -> Result<DenseMatrix, ShapeError> {
    let topo = s.topology();
    let bs = topo.block_size();
    let (sm, sn) = topo.logical_shape();
    let (ks, n) = if transpose_s { (sn, sm) } else { (sm, sn) };
    let (m, ka) = a.shape_t(transpose_a);
    check_inner("dds", (m, ka), (ks, n))?;

    let mut out = DenseMatrix::zeros(m, n);
    // Tile rows of the output come from the dense operand; the final tile may
    // be short when m is not a block multiple.
    for_each_chunk(out.data_mut(), bs * n, |tile_row, rows| {
        let local_rows = rows.len() / n;
        let row0 = tile_row * bs;
        if !transpose_s {
            for c in 0..topo.n_block_cols() {
                let lo = topo.t_col_offsets()[c];
                let hi = topo.t_col_offsets()[c + 1];
                for &k in &topo.t_block_offsets()[lo..hi] {
                    let r = topo.row_indices()[k];
                    let tile = s.block(k);
                    for i in 0..local_rows {
                        let row = &mut rows[i * n + c * bs..i * n + (c + 1) * bs];
                        for kk in 0..bs {
                            let av = a.at_t(transpose_a, row0 + i, r * bs + kk);
                            for (jj, o) in row.iter_mut().enumerate() {
                                *o += av * tile[kk * bs + jj];
                            }
                        }
                    }
                    add_flops(2 * (local_rows * bs * bs) as u64);
                }
            }
        } else {
            // s^T: output block column r collects the CSR row r of s.
            for r in 0..topo.n_block_rows() {
                for k in topo.row_offsets()[r]..topo.row_offsets()[r + 1] {
                    let c = topo.col_indices()[k];
                    let tile = s.block(k);
                    for i in 0..local_rows {
                        let row = &mut rows[i * n + r * bs..i * n + (r + 1) * bs];
                        for kk in 0..bs {
                            let av = a.at_t(transpose_a, row0 + i, c * bs + kk);
                            for (jj, o) in row.iter_mut().enumerate() {
                                // s^T[c*bs + kk, r*bs + jj] is stored at (jj, kk).
                                *o += av * tile[jj * bs + kk];
                            }
                        }
                    }
                    add_flops(2 * (local_rows * bs * bs) as u64);
                }
            }
        }
    });
    Ok(out)
}

/// Apply an activation (or its derivative) to the stored blocks only; the
/// topology is shared with the input, unchanged.
pub fn sparse_map(s: &BlockSparseMatrix, kind: ActivationKind, mode: ActMode) -> BlockSparseMatrix {
    let mut values = s.blocks().to_vec();
    for v in values.iter_mut() {
        *v = activation_scalar(kind, mode, *v);
    }
    BlockSparseMatrix::new(s.topology().clone(), values)
        .expect("value length is preserved by an elementwise map")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::masked_matmul_oracle;

    struct Lcg(u64);

    impl Lcg {
        fn next_f64(&mut self) -> f64 {
            self.0 = self
                .0
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((self.0 >> 11) as f64) / (1u64 << 53) as f64 * 2.0 - 1.0
        }

        fn matrix(&mut self, rows: usize, cols: usize) -> DenseMatrix {
            DenseMatrix::from_fn(rows, cols, |_, _| self.next_f64())
        }
    }

    fn diag_identity_blocks(n_tiles: usize, bs: usize) -> BlockSparseMatrix {
        let coords: Vec<(usize, usize)> = (0..n_tiles).map(|i| (i, i)).collect();
        let topo = Arc::new(BlockTopology::from_blocks(&coords, n_tiles, n_tiles, bs).unwrap());
        let mut s = BlockSparseMatrix::zeros(topo);
        for k in 0..n_tiles {
            for i in 0..bs {
                s.blocks_mut()[k * bs * bs + i * bs + i] = 1.0;
            }
        }
        s
    }

    #[test]
    fn sdd_with_fully_dense_topology_equals_matmul() {
        let mut rng = Lcg(7);
        let a = rng.matrix(8, 6);
        let b = rng.matrix(6, 8);
        let topo = Arc::new(BlockTopology::dense(2, 2, 4));
        let s = sdd(&a, &b, topo, false, false).unwrap();
        let dense = crate::dense::matmul(&a, &b, false, false).unwrap();
        assert!(s.to_dense().max_abs_diff(&dense) <= 1e-12);
    }

    #[test]
    fn sdd_two_block_pattern_matches_masked_oracle() {
        let mut rng = Lcg(21);
        let a = rng.matrix(8, 8);
        let b = rng.matrix(8, 8);
        let topo = Arc::new(BlockTopology::from_blocks(&[(0, 0), (1, 1)], 2, 2, 4).unwrap());
        let s = sdd(&a, &b, topo.clone(), false, false).unwrap();
        let want = masked_matmul_oracle(&a, &b, &topo, false, false).unwrap();
        assert!(s.to_dense().max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn dsd_with_identity_diagonal_returns_b() {
        let mut rng = Lcg(3);
        let s = diag_identity_blocks(3, 2);
        let b = rng.matrix(6, 5);
        let out = dsd(&s, &b, false, false).unwrap();
        assert_eq!(out.data(), b.data());
    }

    #[test]
    fn dds_with_identity_diagonal_returns_a() {
        let mut rng = Lcg(4);
        let s = diag_identity_blocks(3, 2);
        let a = rng.matrix(5, 6);
        let out = dds(&a, &s, false, false).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn transposed_variants_match_densified_transpose() {
        let mut rng = Lcg(11);
        let coords = [(0, 0), (0, 2), (1, 1), (2, 0), (2, 2)];
        let topo = Arc::new(BlockTopology::from_blocks(&coords, 3, 3, 2).unwrap());
        let values: Vec<f64> = (0..coords.len() * 4).map(|_| rng.next_f64()).collect();
        let s = BlockSparseMatrix::new(topo, values).unwrap();
        let b = rng.matrix(6, 4);
        let a = rng.matrix(6, 7);

        let got = dsd(&s, &b, true, false).unwrap();
        let want = crate::dense::matmul(&s.to_dense().transposed(), &b, false, false).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-10);

        let got = dds(&a, &s, true, true).unwrap();
        let want = crate::dense::matmul(&a.transposed(), &s.to_dense().transposed(), false, false)
            .unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn kernel_shape_mismatches_are_errors() {
        let s = diag_identity_blocks(2, 2);
        let bad = DenseMatrix::zeros(5, 3);
        assert!(dsd(&s, &bad, false, false).is_err());
        assert!(dds(&bad, &s, false, false).is_err());
        let topo = Arc::new(BlockTopology::dense(2, 2, 2));
        assert!(sdd(&bad, &bad, topo.clone(), false, false).is_err());
        // Inner dims agree but the output shape does not match the topology.
        let a = DenseMatrix::zeros(6, 3);
        let b = DenseMatrix::zeros(3, 4);
        assert!(sdd(&a, &b, topo, false, false).is_err());
    }

    #[test]
    fn sparse_map_shares_topology_and_matches_dense_path() {
        let mut rng = Lcg(31);
        let coords = [(0, 1), (1, 0), (1, 1)];
        let topo = Arc::new(BlockTopology::from_blocks(&coords, 2, 2, 2).unwrap());
        let values: Vec<f64> = (0..12).map(|_| rng.next_f64()).collect();
        let s = BlockSparseMatrix::new(topo.clone(), values).unwrap();

        let id = sparse_map(&s, ActivationKind::Identity, ActMode::Forward);
        assert_eq!(id.blocks(), s.blocks());

        let ge = sparse_map(&s, ActivationKind::Gelu, ActMode::Forward);
        assert!(Arc::ptr_eq(ge.topology(), s.topology()));
        let dense_path = BlockSparseMatrix::from_dense(
            &crate::dense::activation(ActivationKind::Gelu, &s.to_dense(), ActMode::Forward),
            topo,
        )
        .unwrap();
        assert_eq!(ge.blocks(), dense_path.blocks());

        let z = BlockSparseMatrix::zeros(s.topology().clone());
        let gz = sparse_map(&z, ActivationKind::Gelu, ActMode::Forward);
        assert!(gz.blocks().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flop_count_is_exactly_two_nnz_area_k_for_sdd() {
        let mut rng = Lcg(77);
        let a = rng.matrix(8, 12);
        let b = rng.matrix(12, 8);
        let topo =
            Arc::new(BlockTopology::from_blocks(&[(0, 0), (1, 1), (1, 0)], 2, 2, 4).unwrap());
        let (_, flops) = with_flop_count(|| sdd(&a, &b, topo, false, false).unwrap());
        assert_eq!(flops, 2 * 3 * 16 * 12);
    }
}
