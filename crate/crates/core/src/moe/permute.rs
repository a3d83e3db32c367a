//! Expert capacity, permutation plans (expert-grouped token order with
//! per-expert zero padding), the gather/scatter pair, and construction of the
//! block-diagonal topology an expert batch induces.

use std::sync::Arc;

use crate::bcsr::BlockTopology;
use crate::dense::DenseMatrix;

use super::{CapacityMode, MoEConfig, MoeError, RouterAssignment};

/// Tokens an expert may process: `ceil(num_tokens × capacity_factor /
/// num_experts)`. The ceiling keeps capacity positive at tiny scale where the
/// division is not exact.
pub fn expert_capacity(num_tokens: usize, num_experts: usize, capacity_factor: f64) -> usize {
    assert!(num_tokens > 0 && num_experts > 0 && capacity_factor > 0.0);
    (num_tokens as f64 * capacity_factor / num_experts as f64).ceil() as usize
}

/// Expert-grouped token ordering with per-expert padded row counts and the
/// set of `(token, slot)` assignments excluded by capacity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationPlan {
    block_size: usize,
    num_tokens: usize,
    /// Kept assignments per expert.
    counts: Vec<usize>,
    /// `counts` rounded up to a multiple of `block_size` (zero stays zero).
    padded_counts: Vec<usize>,
    /// Prefix sums of `padded_counts`; expert `e` owns padded rows
    /// `padded_offsets[e] .. padded_offsets[e+1]`.
    padded_offsets: Vec<usize>,
    /// Kept `(token, slot)` pairs grouped by expert, ascending token within
    /// each group.
    gather_order: Vec<(usize, usize)>,
    /// Assignments dropped by capacity, ascending `(token, slot)`.
    dropped: Vec<(usize, usize)>,
    total_padded_rows: usize,
}

impl PermutationPlan {
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn padded_counts(&self) -> &[usize] {
        &self.padded_counts
    }

    pub fn padded_offsets(&self) -> &[usize] {
        &self.padded_offsets
    }

    pub fn gather_order(&self) -> &[(usize, usize)] {
        &self.gather_order
    }

    pub fn dropped(&self) -> &[(usize, usize)] {
        &self.dropped
    }

    pub fn total_padded_rows(&self) -> usize {
        self.total_padded_rows
    }

    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    /// Padded output row of the `i`-th kept pair within expert `e`'s group.
    fn group_row(&self, expert: usize, i: usize) -> usize {
        self.padded_offsets[expert] + i
    }

    /// Iterate kept pairs with their padded rows: `(padded_row, token, slot)`.
    pub fn placements(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut expert = 0usize;
        let mut within = 0usize;
        self.gather_order.iter().map(move |&(token, slot)| {
            while within == self.counts[expert] {
                expert += 1;
                within = 0;
            }
            let row = self.group_row(expert, within);
            within += 1;
            (row, token, slot)
        })
    }
}

/// Group the kept `(token, slot)` assignments by expert, stable by token
/// index, and pad every group to a `block_size` multiple.
///
/// Dropless mode keeps everything. Capacity mode keeps, per expert, the first
/// `expert_capacity` pairs in ascending token order and drops the rest.
pub fn make_permutation(
    assignment: &RouterAssignment,
    config: &MoEConfig,
    num_tokens: usize,
) -> PermutationPlan {
    assert_eq!(num_tokens, assignment.num_tokens());
    let num_experts = assignment.num_experts();
    let capacity = match config.capacity_factor {
        CapacityMode::Dropless => usize::MAX,
        CapacityMode::Factor(f) if num_tokens == 0 => {
            let _ = f;
            0
        }
        CapacityMode::Factor(f) => expert_capacity(num_tokens, num_experts, f),
    };

    let mut kept: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_experts];
    let mut dropped = Vec::new();
    for token in 0..num_tokens {
        for slot in 0..assignment.top_k() {
            let e = assignment.expert_id(token, slot);
            if kept[e].len() < capacity {
                kept[e].push((token, slot));
            } else {
                dropped.push((token, slot));
            }
        }
    }
    dropped.sort_unstable();

    let bs = config.block_size;
    let counts: Vec<usize> = kept.iter().map(Vec::len).collect();
    let padded_counts: Vec<usize> = counts.iter().map(|&c| c.div_ceil(bs) * bs).collect();
    let mut padded_offsets = Vec::with_capacity(num_experts + 1);
    padded_offsets.push(0);
    for &p in &padded_counts {
        padded_offsets.push(padded_offsets.last().unwrap() + p);
    }
    let total_padded_rows = *padded_offsets.last().unwrap();
    let gather_order: Vec<(usize, usize)> = kept.into_iter().flatten().collect();

    PermutationPlan {
        block_size: bs,
        num_tokens,
        counts,
        padded_counts,
        padded_offsets,
        gather_order,
        dropped,
        total_padded_rows,
    }
}

/// Permute token rows into expert groups, zero-filling the pad rows at the
/// tail of each group.
pub fn padded_gather(x: &DenseMatrix, plan: &PermutationPlan) -> DenseMatrix {
    assert_eq!(x.rows(), plan.num_tokens(), "padded_gather row count");
    let mut out = DenseMatrix::zeros(plan.total_padded_rows(), x.cols());
    for (row, token, _slot) in plan.placements() {
        out.row_mut(row).copy_from_slice(x.row(token));
    }
    out
}

/// Invert the permutation with gate weighting: token `t`'s output row is the
/// gate-weighted sum of the expert output rows of its kept slots. Tokens with
/// every slot dropped come back as exact zeros.
pub fn padded_scatter(
    y: &DenseMatrix,
    plan: &PermutationPlan,
    assignment: &RouterAssignment,
) -> DenseMatrix {
    assert_eq!(
        y.rows(),
        plan.total_padded_rows(),
        "padded_scatter row count"
    );
    let mut out = DenseMatrix::zeros(plan.num_tokens(), y.cols());
    // Group order is ascending expert, so each token's slot contributions
    // accumulate in a fixed order.
    for (row, token, slot) in plan.placements() {
        let gate = assignment.gate(token, slot);
        let src = y.row(row);
        let dst = out.row_mut(token);
        for (d, s) in dst.iter_mut().zip(src) {
            *d += gate * s;
        }
    }
    out
}

/// Block topology of the stacked expert batch: expert `e` contributes a dense
/// rectangle of `padded_counts[e] / block_size` block rows spanning its own
/// `ffn_hidden_size / block_size` block columns. Transpose metadata is built
/// here, once, and amortized across every product that uses the topology.
pub fn plan_topology(
    plan: &PermutationPlan,
    config: &MoEConfig,
) -> Result<Arc<BlockTopology>, MoeError> {
    config.validate()?;
    let bs = config.block_size;
    let cols_per_expert = config.ffn_hidden_size / bs;
    let n_block_rows = plan.total_padded_rows() / bs;
    let n_block_cols = config.num_experts * cols_per_expert;

    let mut coords = Vec::new();
    for e in 0..plan.num_experts() {
        let row0 = plan.padded_offsets()[e] / bs;
        let rows = plan.padded_counts()[e] / bs;
        for r in row0..row0 + rows {
            for c in e * cols_per_expert..(e + 1) * cols_per_expert {
                coords.push((r, c));
            }
        }
    }
    let topo = BlockTopology::from_blocks(&coords, n_block_rows, n_block_cols, bs)?;
    Ok(Arc::new(topo))
}
