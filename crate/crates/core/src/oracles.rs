//! Independent brute-force references for the kernels and the MoE layer.
//!
//! Everything here is written with its own loops — no calls into the kernel
//! or layer code it is used to check — and runs at desk scale only. The MoE
//! oracle follows the batched per-expert formulation: loop over experts,
//! slice that expert's weights, run a plain dense 2-layer MLP over its
//! tokens, recombine with the gates.

use crate::bcsr::BlockTopology;
use crate::dense::{DenseMatrix, ShapeError};
use crate::moe::{CapacityMode, MoEConfig, MoEWeights};

/// Coordinatewise relative error `|a-b| / max(1e-8, |a|, |b|)`, reported as
/// the max over coordinates.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn eff(m: &DenseMatrix, t: bool, i: usize, j: usize) -> f64 {
    if t {
        m.at(j, i)
    } else {
        m.at(i, j)
    }
}

fn eff_shape(m: &DenseMatrix, t: bool) -> (usize, usize) {
    if t {
        (m.cols(), m.rows())
    } else {
        (m.rows(), m.cols())
    }
}

/// Plain triple-loop product of optionally transposed operands.
pub fn naive_matmul(
    a: &DenseMatrix,
    b: &DenseMatrix,
    transpose_a: bool,
    transpose_b: bool,
) -> Result<DenseMatrix, ShapeError> {
    let (m, ka) = eff_shape(a, transpose_a);
    let (kb, n) = eff_shape(b, transpose_b);
    if ka != kb {
        return Err(ShapeError::new("naive_matmul", (m, ka), (kb, n)));
    }
    let mut out = DenseMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..ka {
                acc += eff(a, transpose_a, i, k) * eff(b, transpose_b, k, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Reference for SDD: multiply densely, then zero every block outside the
/// topology.
pub fn masked_matmul_oracle(
    a: &DenseMatrix,
    b: &DenseMatrix,
    topology: &BlockTopology,
    transpose_a: bool,
    transpose_b: bool,
) -> Result<DenseMatrix, ShapeError> {
    let full = naive_matmul(a, b, transpose_a, transpose_b)?;
    if full.shape() != topology.logical_shape() {
        return Err(ShapeError::new(
            "masked_matmul_oracle",
            full.shape(),
            topology.logical_shape(),
        ));
    }
    let bs = topology.block_size();
    let mut mask = vec![false; topology.n_block_rows() * topology.n_block_cols()];
    for k in 0..topology.nnz_blocks() {
        let (r, c) = topology.block_coord(k);
        mask[r * topology.n_block_cols() + c] = true;
    }
    let mut out = DenseMatrix::zeros(full.rows(), full.cols());
    for i in 0..full.rows() {
        for j in 0..full.cols() {
            if mask[(i / bs) * topology.n_block_cols() + j / bs] {
                out.set(i, j, full.at(i, j));
            }
        }
    }
    Ok(out)
}

// Activation formulas restated locally so the oracle path stays independent
// of the implementation it checks.
fn oracle_activation(kind: crate::dense::ActivationKind, x: f64) -> f64 {
    use crate::dense::ActivationKind::*;
    match kind {
        Identity => x,
        Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Gelu => {
            let u = 0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
    }
}

/// Batched per-expert reference for the MoE layer.
///
/// Routing, capacity and gating are re-derived here with plain loops: softmax
/// with max subtraction, greedy top-k with ties to the lower index, and the
/// keep-earliest-token capacity rule. Each expert then runs as an unpadded
/// dense 2-layer MLP over its kept tokens and the results are recombined by
/// gate weight.
pub fn per_expert_moe_oracle(x: &DenseMatrix, w: &MoEWeights, config: &MoEConfig) -> DenseMatrix {
    let num_tokens = x.rows();
    let hidden = config.hidden_size;
    let ffn = config.ffn_hidden_size;
    let num_experts = config.num_experts;
    let top_k = config.top_k;
    assert_eq!(x.cols(), hidden);

    // Router scores.
    let mut probs = vec![vec![0.0f64; num_experts]; num_tokens];
    for (t, row) in probs.iter_mut().enumerate() {
        for (e, p) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..hidden {
                acc += x.at(t, k) * w.router_w.at(k, e);
            }
            *p = acc;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in row.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in row.iter_mut() {
            *p /= sum;
        }
    }

    // Greedy top-k with gates.
    let mut selected: Vec<Vec<(usize, f64)>> = Vec::with_capacity(num_tokens);
    for row in &probs {
        let mut order: Vec<usize> = (0..num_experts).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let picks = &order[..top_k];
        let norm = if config.renormalize_gates {
            picks.iter().map(|&e| row[e]).sum::<f64>()
        } else {
            1.0
        };
        selected.push(picks.iter().map(|&e| (e, row[e] / norm)).collect());
    }

    // Capacity: keep the earliest tokens per expert.
    let capacity = match config.capacity_factor {
        CapacityMode::Dropless => usize::MAX,
        CapacityMode::Factor(f) => (num_tokens as f64 * f / num_experts as f64).ceil() as usize,
    };
    let mut per_expert: Vec<Vec<(usize, f64)>> = vec![Vec::new(); num_experts];
    for (t, picks) in selected.iter().enumerate() {
        for &(e, gate) in picks {
            if per_expert[e].len() < capacity {
                per_expert[e].push((t, gate));
            }
        }
    }

    // One dense MLP per expert over its own weight slices.
    let mut out = DenseMatrix::zeros(num_tokens, hidden);
    for (e, tokens) in per_expert.iter().enumerate() {
        let col0 = e * ffn;
        for &(t, gate) in tokens {
            let mut h = vec![0.0f64; ffn];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..hidden {
                    acc += x.at(t, k) * w.w1.at(k, col0 + j);
                }
                *hj = oracle_activation(config.activation, acc);
            }
            for c in 0..hidden {
                let mut acc = 0.0;
                for (j, hj) in h.iter().enumerate() {
                    acc += hj * w.w2.at(col0 + j, c);
                }
                out.set(t, c, out.at(t, c) + gate * acc);
            }
        }
    }
    out
}

/// Central-difference gradient estimate: `(f(p+h) − f(p−h)) / 2h` per
/// coordinate. `loss_fn` must be deterministic and smooth at `params`.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut grad = vec![0.0f64; params.len()];
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let plus = loss_fn(&p);
        p[i] = orig - h;
        let minus = loss_fn(&p);
        p[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}
