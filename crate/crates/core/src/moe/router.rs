//! Learned router: linear projection to expert scores, softmax, greedy top-k
//! selection, the gate-path backward, and the load-balancing auxiliary loss.

use crate::dense::{matmul, softmax_rows, DenseMatrix};

use super::{MoEConfig, MoeError};

/// Per-token expert assignments and gate weights, plus the full softmax
/// matrix (kept for the gate backward and the auxiliary loss).
#[derive(Debug, Clone, PartialEq)]
pub struct RouterAssignment {
    num_tokens: usize,
    num_experts: usize,
    top_k: usize,
    renormalized: bool,
    /// `num_tokens × top_k`, descending score order within a token.
    expert_ids: Vec<usize>,
    /// `num_tokens × top_k`, each in (0, 1].
    gates: Vec<f64>,
    /// `num_tokens × num_experts` softmax probabilities.
    probs: DenseMatrix,
}

impl RouterAssignment {
    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn renormalized(&self) -> bool {
        self.renormalized
    }

    #[inline]
    pub fn expert_id(&self, token: usize, slot: usize) -> usize {
        self.expert_ids[token * self.top_k + slot]
    }

    #[inline]
    pub fn gate(&self, token: usize, slot: usize) -> f64 {
        self.gates[token * self.top_k + slot]
    }

    pub fn probs(&self) -> &DenseMatrix {
        &self.probs
    }

    /// Tokens routed to each expert, counting every selected slot.
    pub fn assigned_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_experts];
        for t in 0..self.num_tokens {
            for s in 0..self.top_k {
                counts[self.expert_id(t, s)] += 1;
            }
        }
        counts
    }

    /// Fraction of tokens whose highest-scoring slot lands on each expert.
    pub fn top1_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_experts];
        for t in 0..self.num_tokens {
            counts[self.expert_id(t, 0)] += 1;
        }
        counts
            .into_iter()
            .map(|c| c as f64 / self.num_tokens as f64)
            .collect()
    }
}

/// Score tokens against the router projection and greedily pick the `top_k`
/// experts per token, ties broken toward the lower expert index.
///
/// Gates are the raw softmax probabilities of the selected experts, or those
/// probabilities renormalized to sum to one when `renormalize_gates` is set.
pub fn router_forward(
    x: &DenseMatrix,
    router_w: &DenseMatrix,
    top_k: usize,
    renormalize_gates: bool,
) -> Result<RouterAssignment, MoeError> {
    let num_experts = router_w.cols();
    if top_k == 0 || top_k > num_experts {
        return Err(MoeError::Config(format!(
            "top_k {top_k} must be in 1..={num_experts}"
        )));
    }
    let logits = matmul(x, router_w, false, false)?;
    let probs = softmax_rows(&logits);
    let num_tokens = x.rows();

    let mut expert_ids = Vec::with_capacity(num_tokens * top_k);
    let mut gates = Vec::with_capacity(num_tokens * top_k);
    let mut order: Vec<usize> = Vec::with_capacity(num_experts);
    for t in 0..num_tokens {
        let row = probs.row(t);
        order.clear();
        order.extend(0..num_experts);
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let selected = &order[..top_k];
        let norm = if renormalize_gates {
            selected.iter().map(|&e| row[e]).sum::<f64>()
        } else {
            1.0
        };
        for &e in selected {
            expert_ids.push(e);
            gates.push(row[e] / norm);
        }
    }

    Ok(RouterAssignment {
        num_tokens,
        num_experts,
        top_k,
        renormalized: renormalize_gates,
        expert_ids,
        gates,
        probs,
    })
}

/// Gradient of the softmax inputs given a gradient on its outputs:
/// `dlogits[t,i] = p_i · (dp_i − Σ_j dp_j p_j)` per row.
pub fn softmax_backward(probs: &DenseMatrix, dprobs: &DenseMatrix) -> DenseMatrix {
    assert_eq!(probs.shape(), dprobs.shape());
    let mut out = DenseMatrix::zeros(probs.rows(), probs.cols());
    for t in 0..probs.rows() {
        let p = probs.row(t);
        let dp = dprobs.row(t);
        let dot: f64 = (0..p.len()).map(|i| dp[i] * p[i]).sum();
        let row = out.row_mut(t);
        for i in 0..p.len() {
            row[i] = p[i] * (dp[i] - dot);
        }
    }
    out
}

/// Push a gradient on the softmax probabilities back to the router weight and
/// the layer input: returns `(grad_router_w, dx_contribution)`.
pub fn router_backward(
    x: &DenseMatrix,
    router_w: &DenseMatrix,
    probs: &DenseMatrix,
    dprobs: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix), MoeError> {
    let dlogits = softmax_backward(probs, dprobs);
    let grad_w = matmul(x, &dlogits, true, false)?;
    let dx = matmul(&dlogits, router_w, false, true)?;
    Ok((grad_w, dx))
}

/// Convert the gate gradients of an assignment into a gradient on the full
/// probability matrix, honoring the gate definition (raw or renormalized).
///
/// `dgates` is `num_tokens × top_k` in slot order; slots whose output was
/// dropped must carry a zero entry.
pub(super) fn gate_grad_to_prob_grad(assignment: &RouterAssignment, dgates: &[f64]) -> DenseMatrix {
    let top_k = assignment.top_k;
    let mut dprobs = DenseMatrix::zeros(assignment.num_tokens, assignment.num_experts);
    for t in 0..assignment.num_tokens {
        let dg = &dgates[t * top_k..(t + 1) * top_k];
        if !assignment.renormalized {
            for (s, &g) in dg.iter().enumerate() {
                let e = assignment.expert_id(t, s);
                dprobs.set(t, e, dprobs.at(t, e) + g);
            }
        } else {
            // g_s = p_s / S over the selected slots; every selected prob
            // feels every slot's gradient through the normalizer.
            let sum: f64 = (0..top_k)
                .map(|s| assignment.probs.at(t, assignment.expert_id(t, s)))
                .sum();
            let inner: f64 = (0..top_k).map(|s| dg[s] * assignment.gate(t, s)).sum();
            for (s, &g) in dg.iter().enumerate() {
                let e = assignment.expert_id(t, s);
                let d = g / sum - inner / sum;
                dprobs.set(t, e, dprobs.at(t, e) + d);
            }
        }
    }
    dprobs
}

/// Switch-style load-balancing loss: `coefficient · E · Σ_e f_e · P_e` where
/// `f_e` is the fraction of top-1 assignments to expert `e` (treated as
/// constant) and `P_e` the mean routed probability.
///
/// Returns the loss and its analytic gradient with respect to the probability
/// matrix.
pub fn load_balance_loss(assignment: &RouterAssignment, config: &MoEConfig) -> (f64, DenseMatrix) {
    let e = assignment.num_experts;
    let t = assignment.num_tokens;
    let fractions = assignment.top1_fractions();
    let probs = assignment.probs();

    let mut mean_probs = vec![0.0f64; e];
    for token in 0..t {
        for (expert, m) in mean_probs.iter_mut().enumerate() {
            *m += probs.at(token, expert);
        }
    }
    for m in mean_probs.iter_mut() {
        *m /= t as f64;
    }

    let coeff = config.aux_loss_coefficient;
    let loss = coeff
        * e as f64
        * fractions
            .iter()
            .zip(&mean_probs)
            .map(|(f, p)| f * p)
            .sum::<f64>();

    let mut dprobs = DenseMatrix::zeros(t, e);
    for token in 0..t {
        let row = dprobs.row_mut(token);
        for (expert, g) in row.iter_mut().enumerate() {
            *g = coeff * e as f64 * fractions[expert] / t as f64;
        }
    }
    (loss, dprobs)
}
