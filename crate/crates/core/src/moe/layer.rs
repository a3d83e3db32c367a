//! The dropless MoE layer: gather the tokens into expert groups, run every
//! expert's 2-layer MLP as one SDD followed by one DSD over a block-diagonal
//! topology, scatter back with gate weighting. The backward pass runs the
//! transposed product family (SDDᵀ, DSᵀD, DSDᵀ, DDᵀS) plus the gate path
//! through the router softmax.

use crate::bcsr::BlockSparseMatrix;
use crate::dense::{ActMode, DenseMatrix, ShapeError};
use crate::kernels::{dds, dsd, sdd, sparse_map};
use crate::rng::Stream;

use super::router::gate_grad_to_prob_grad;
use super::{
    make_permutation, padded_gather, padded_scatter, plan_topology, router_backward,
    router_forward, CapacityMode, MoEConfig, MoeError, PermutationPlan, RouterAssignment,
};

/// Router projection and the stacked expert weights.
///
/// `w1` is `hidden_size × num_experts·ffn_hidden_size` with expert `e`
/// owning columns `[e·ffn, (e+1)·ffn)`; `w2` is the transposed-layout
/// counterpart, `num_experts·ffn_hidden_size × hidden_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEWeights {
    pub router_w: DenseMatrix,
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
}

impl MoEWeights {
    pub fn zeros(config: &MoEConfig) -> Self {
        Self {
            router_w: DenseMatrix::zeros(config.hidden_size, config.num_experts),
            w1: DenseMatrix::zeros(config.hidden_size, config.inner_dim()),
            w2: DenseMatrix::zeros(config.inner_dim(), config.hidden_size),
        }
    }

    /// Scaled-gaussian initialization, deterministic in the seed.
    pub fn random(config: &MoEConfig, seed: u64) -> Self {
        let mut s = Stream::new(seed, 0);
        let router_scale = 1.0 / (config.hidden_size as f64).sqrt();
        let w1_scale = 1.0 / (config.hidden_size as f64).sqrt();
        let w2_scale = 1.0 / (config.ffn_hidden_size as f64).sqrt();
        let router_w = DenseMatrix::from_fn(config.hidden_size, config.num_experts, |_, _| {
            s.gaussian() * router_scale
        });
        let w1 = DenseMatrix::from_fn(config.hidden_size, config.inner_dim(), |_, _| {
            s.gaussian() * w1_scale
        });
        let w2 = DenseMatrix::from_fn(config.inner_dim(), config.hidden_size, |_, _| {
            s.gaussian() * w2_scale
        });
        Self { router_w, w1, w2 }
    }

    fn check(&self, config: &MoEConfig) -> Result<(), MoeError> {
        let want = [
            (
                "router_w",
                (config.hidden_size, config.num_experts),
                self.router_w.shape(),
            ),
            (
                "w1",
                (config.hidden_size, config.inner_dim()),
                self.w1.shape(),
            ),
            (
                "w2",
                (config.inner_dim(), config.hidden_size),
                self.w2.shape(),
            ),
        ];
        for (op, expected, got) in want {
            if expected != got {
                return Err(MoeError::Shape(ShapeError::new(op, expected, got)));
            }
        }
        Ok(())
    }
}

/// Gradients mirroring [`MoEWeights`] shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEGrads {
    pub router_w: DenseMatrix,
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
}

impl MoEGrads {
    pub fn zeros(config: &MoEConfig) -> Self {
        let w = MoEWeights::zeros(config);
        Self {
            router_w: w.router_w,
            w1: w.w1,
            w2: w.w2,
        }
    }
}

/// Everything the backward pass needs from a forward run.
#[derive(Debug, Clone)]
pub struct DmoeCache {
    config: MoEConfig,
    x: DenseMatrix,
    x_gathered: DenseMatrix,
    h_pre: BlockSparseMatrix,
    h_post: BlockSparseMatrix,
    /// DSD output: per-padded-row expert results before un-permutation.
    expert_rows: DenseMatrix,
    assignment: RouterAssignment,
    plan: PermutationPlan,
}

impl DmoeCache {
    pub fn assignment(&self) -> &RouterAssignment {
        &self.assignment
    }

    pub fn plan(&self) -> &PermutationPlan {
        &self.plan
    }
}

/// Routing outcome of a capacity-limited forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DropStats {
    /// Tokens routed to each expert (all slots).
    pub assigned: Vec<usize>,
    /// Assignments dropped per expert.
    pub dropped: Vec<usize>,
    /// `dropped / assigned` per expert, zero where nothing was assigned.
    pub per_expert_fraction: Vec<f64>,
    /// Total dropped over total assignments.
    pub overall_fraction: f64,
}

impl DropStats {
    fn new(assignment: &RouterAssignment, plan: &PermutationPlan) -> Self {
        let assigned = assignment.assigned_counts();
        let dropped: Vec<usize> = assigned
            .iter()
            .zip(plan.counts())
            .map(|(&a, &kept)| a - kept)
            .collect();
        let per_expert_fraction = assigned
            .iter()
            .zip(&dropped)
            .map(|(&a, &d)| if a == 0 { 0.0 } else { d as f64 / a as f64 })
            .collect();
        let total_assigned: usize = assigned.iter().sum();
        let total_dropped: usize = dropped.iter().sum();
        let overall_fraction = if total_assigned == 0 {
            0.0
        } else {
            total_dropped as f64 / total_assigned as f64
        };
        Self {
            assigned,
            dropped,
            per_expert_fraction,
            overall_fraction,
        }
    }
}

fn forward_impl(
    x: &DenseMatrix,
    w: &MoEWeights,
    config: &MoEConfig,
) -> Result<(DenseMatrix, DmoeCache), MoeError> {
    config.validate()?;
    w.check(config)?;
    if x.cols() != config.hidden_size {
        return Err(MoeError::Shape(ShapeError::new(
            "moe input",
            (x.rows(), x.cols()),
            (x.rows(), config.hidden_size),
        )));
    }

    let assignment = router_forward(x, &w.router_w, config.top_k, config.renormalize_gates)?;
    let plan = make_permutation(&assignment, config, x.rows());
    let topology = plan_topology(&plan, config)?;
    let x_gathered = padded_gather(x, &plan);
    let h_pre = sdd(&x_gathered, &w.w1, topology, false, false)?;
    let h_post = sparse_map(&h_pre, config.activation, ActMode::Forward);
    let expert_rows = dsd(&h_post, &w.w2, false, false)?;
    let y = padded_scatter(&expert_rows, &plan, &assignment);

    let cache = DmoeCache {
        config: config.clone(),
        x: x.clone(),
        x_gathered,
        h_pre,
        h_post,
        expert_rows,
        assignment,
        plan,
    };
    Ok((y, cache))
}

/// Dropless forward pass: every token reaches every expert it was routed to,
/// whatever the load imbalance. Any capacity factor in `config` is ignored.
pub fn dmoe_forward(
    x: &DenseMatrix,
    w: &MoEWeights,
    config: &MoEConfig,
) -> Result<(DenseMatrix, DmoeCache), MoeError> {
    let dropless = MoEConfig {
        capacity_factor: CapacityMode::Dropless,
        ..config.clone()
    };
    forward_impl(x, w, &dropless)
}

/// Token-dropping baseline: identical pipeline under a finite capacity
/// factor. Tokens whose every slot is dropped produce zero output rows;
/// reintroducing them through a residual path is the caller's concern.
pub fn dropping_forward(
    x: &DenseMatrix,
    w: &MoEWeights,
    config: &MoEConfig,
) -> Result<(DenseMatrix, DmoeCache, DropStats), MoeError> {
    if config.capacity_factor.is_dropless() {
        return Err(MoeError::Config(
            "dropping_forward requires a finite capacity_factor".into(),
        ));
    }
    let (y, cache) = forward_impl(x, w, config)?;
    let stats = DropStats::new(&cache.assignment, &cache.plan);
    Ok((y, cache, stats))
}

/// Manual backward pass. Returns the input gradient and the weight gradients.
///
/// The expert path runs SDDᵀ (second-layer data grad), DSᵀD (second-layer
/// weight grad), DSDᵀ (first-layer data grad) and DDᵀS (first-layer weight
/// grad). The router gradient flows only through the gate values: per kept
/// slot, `d gate = ⟨expert output row, dy row⟩`, pushed back through the
/// (optionally renormalized) softmax. The auxiliary loss contributes
/// separately through [`super::load_balance_loss`] and [`router_backward`].
pub fn dmoe_backward(
    dy: &DenseMatrix,
    cache: &DmoeCache,
    w: &MoEWeights,
) -> Result<(DenseMatrix, MoEGrads), MoeError> {
    let config = &cache.config;
    w.check(config)?;
    let plan = &cache.plan;
    let assignment = &cache.assignment;
    if dy.shape() != (plan.num_tokens(), config.hidden_size) {
        return Err(MoeError::Shape(ShapeError::new(
            "dmoe_backward dy",
            dy.shape(),
            (plan.num_tokens(), config.hidden_size),
        )));
    }

    // Gate-weighted scatter of dy back to padded expert rows, and the gate
    // gradients from the rows the forward pass actually produced.
    let top_k = assignment.top_k();
    let mut d_expert_rows = DenseMatrix::zeros(plan.total_padded_rows(), config.hidden_size);
    let mut dgates = vec![0.0f64; plan.num_tokens() * top_k];
    for (row, token, slot) in plan.placements() {
        let gate = assignment.gate(token, slot);
        let dst = d_expert_rows.row_mut(row);
        let src = dy.row(token);
        for (d, s) in dst.iter_mut().zip(src) {
            *d = gate * s;
        }
        dgates[token * top_k + slot] = cache
            .expert_rows
            .row(row)
            .iter()
            .zip(src)
            .map(|(a, b)| a * b)
            .sum();
    }

    // Second expert layer.
    let topology = cache.h_post.topology().clone();
    let dh_post = sdd(&d_expert_rows, &w.w2, topology, false, true)?;
    let grad_w2 = dsd(&cache.h_post, &d_expert_rows, true, false)?;

    // Activation derivative at the cached pre-activations, applied in place
    // on the shared topology.
    let act_grad = sparse_map(&cache.h_pre, config.activation, ActMode::Grad);
    let mut dh_pre = dh_post;
    for (v, g) in dh_pre.blocks_mut().iter_mut().zip(act_grad.blocks()) {
        *v *= g;
    }

    // First expert layer.
    let dx_gathered = dsd(&dh_pre, &w.w1, false, true)?;
    let grad_w1 = dds(&cache.x_gathered, &dh_pre, true, false)?;

    // Un-permute the input gradient; gates are already inside d_expert_rows.
    let mut dx = DenseMatrix::zeros(plan.num_tokens(), config.hidden_size);
    for (row, token, _slot) in plan.placements() {
        let src = dx_gathered.row(row);
        let dst = dx.row_mut(token);
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }

    // Gate path into the router weights and the input.
    let dprobs = gate_grad_to_prob_grad(assignment, &dgates);
    let (grad_router_w, dx_router) =
        router_backward(&cache.x, &w.router_w, assignment.probs(), &dprobs)?;
    for (d, r) in dx.data_mut().iter_mut().zip(dx_router.data()) {
        *d += r;
    }

    Ok((
        dx,
        MoEGrads {
            router_w: grad_router_w,
            w1: grad_w1,
            w2: grad_w2,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{matmul, ActivationKind};
    use crate::kernels::with_flop_count;

    fn small_config() -> MoEConfig {
        MoEConfig {
            hidden_size: 4,
            ffn_hidden_size: 4,
            num_experts: 1,
            top_k: 1,
            block_size: 2,
            activation: ActivationKind::Identity,
            ..MoEConfig::default()
        }
    }

    fn random_x(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut s = Stream::new(seed, 9);
        DenseMatrix::from_fn(rows, cols, |_, _| s.symmetric())
    }

    #[test]
    fn single_expert_identity_degenerates_to_dense_mlp() {
        let config = small_config();
        let w = MoEWeights::random(&config, 3);
        let x = random_x(6, 4, 11);
        let (y, _) = dmoe_forward(&x, &w, &config).unwrap();
        let dense = matmul(
            &matmul(&x, &w.w1, false, false).unwrap(),
            &w.w2,
            false,
            false,
        )
        .unwrap();
        assert!(y.max_abs_diff(&dense) <= 1e-10);
    }

    #[test]
    fn dropping_with_ample_capacity_is_bitwise_dropless() {
        let config = MoEConfig {
            hidden_size: 8,
            ffn_hidden_size: 8,
            num_experts: 4,
            block_size: 4,
            capacity_factor: CapacityMode::Factor(16.0),
            ..MoEConfig::default()
        };
        let w = MoEWeights::random(&config, 5);
        let x = random_x(12, 8, 13);
        let (y_drop, _, stats) = dropping_forward(&x, &w, &config).unwrap();
        let (y_free, _) = dmoe_forward(&x, &w, &config).unwrap();
        assert_eq!(y_drop.data(), y_free.data());
        assert_eq!(stats.overall_fraction, 0.0);
    }

    #[test]
    fn collapsed_routing_at_capacity_one_drops_three_quarters() {
        // Push every token onto expert 0 by making its router column huge.
        let config = MoEConfig {
            hidden_size: 4,
            ffn_hidden_size: 4,
            num_experts: 4,
            block_size: 2,
            capacity_factor: CapacityMode::Factor(1.0),
            ..MoEConfig::default()
        };
        let mut w = MoEWeights::random(&config, 7);
        w.router_w = DenseMatrix::from_fn(4, 4, |_, c| if c == 0 { 10.0 } else { 0.0 });
        let x = DenseMatrix::from_fn(8, 4, |_, _| 0.5);
        let (y, _, stats) = dropping_forward(&x, &w, &config).unwrap();
        assert_eq!(stats.overall_fraction, 0.75);
        assert_eq!(stats.dropped, vec![6, 0, 0, 0]);
        // Dropped tokens 2..=7 come back as exact zero rows.
        for t in 2..8 {
            assert!(y.row(t).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn perfectly_balanced_routing_never_drops_at_unit_capacity() {
        let config = MoEConfig {
            hidden_size: 4,
            ffn_hidden_size: 4,
            num_experts: 4,
            block_size: 2,
            capacity_factor: CapacityMode::Factor(1.0),
            ..MoEConfig::default()
        };
        let mut w = MoEWeights::random(&config, 9);
        // Route token t to expert t % 4 via a dominant router column.
        w.router_w = DenseMatrix::identity(4);
        let x = DenseMatrix::from_fn(16, 4, |t, c| if t % 4 == c { 30.0 } else { 0.0 });
        let (_, _, stats) = dropping_forward(&x, &w, &config).unwrap();
        assert_eq!(stats.overall_fraction, 0.0);
        assert!(stats.dropped.iter().all(|&d| d == 0));
    }

    #[test]
    fn dropping_forward_rejects_dropless_config() {
        let config = small_config();
        let w = MoEWeights::random(&config, 1);
        let x = random_x(4, 4, 2);
        assert!(dropping_forward(&x, &w, &config).is_err());
    }

    #[test]
    fn forward_flops_track_padded_counts_exactly() {
        let config = MoEConfig {
            hidden_size: 8,
            ffn_hidden_size: 8,
            num_experts: 4,
            block_size: 4,
            ..MoEConfig::default()
        };
        let w = MoEWeights::random(&config, 21);
        let x = random_x(32, 8, 22);
        let ((_, cache), flops) = with_flop_count(|| dmoe_forward(&x, &w, &config).unwrap());
        let expected: u64 = cache
            .plan
            .padded_counts()
            .iter()
            .map(|&p| {
                2 * p as u64
                    * config.ffn_hidden_size as u64
                    * (config.hidden_size as u64 + config.hidden_size as u64)
            })
            .sum();
        assert_eq!(flops, expected);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients_everywhere() {
        let config = MoEConfig {
            hidden_size: 4,
            ffn_hidden_size: 4,
            num_experts: 3,
            top_k: 2,
            block_size: 2,
            activation: ActivationKind::Gelu,
            ..MoEConfig::default()
        };
        let w = MoEWeights::random(&config, 31);
        let x = random_x(10, 4, 32);
        let (_, cache) = dmoe_forward(&x, &w, &config).unwrap();
        let dy = DenseMatrix::zeros(10, 4);
        let (dx, grads) = dmoe_backward(&dy, &cache, &w).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(grads.router_w.data().iter().all(|&v| v == 0.0));
        assert!(grads.w1.data().iter().all(|&v| v == 0.0));
        assert!(grads.w2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_expert_identity_backward_matches_hand_derivation() {
        let config = small_config();
        let w = MoEWeights::random(&config, 41);
        let x = random_x(6, 4, 42);
        let (_, cache) = dmoe_forward(&x, &w, &config).unwrap();
        let dy = random_x(6, 4, 43);
        let (dx, grads) = dmoe_backward(&dy, &cache, &w).unwrap();

        // Gate is exactly 1 for a single expert and the softmax backward of a
        // one-class distribution is zero, so the expert path is the whole
        // gradient: dx = dy·w2ᵀ·w1ᵀ, dw2 = (x·w1)ᵀ·dy, dw1 = xᵀ·(dy·w2ᵀ).
        let dy_w2t = matmul(&dy, &w.w2, false, true).unwrap();
        let dx_want = matmul(&dy_w2t, &w.w1, false, true).unwrap();
        assert!(dx.max_abs_diff(&dx_want) <= 1e-10);

        let h = matmul(&x, &w.w1, false, false).unwrap();
        let dw2_want = matmul(&h, &dy, true, false).unwrap();
        assert!(grads.w2.max_abs_diff(&dw2_want) <= 1e-10);

        let dw1_want = matmul(&x, &dy_w2t, true, false).unwrap();
        assert!(grads.w1.max_abs_diff(&dw1_want) <= 1e-10);

        assert!(grads.router_w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_mismatched_input_width() {
        let config = small_config();
        let w = MoEWeights::random(&config, 51);
        let x = DenseMatrix::zeros(4, 5);
        assert!(dmoe_forward(&x, &w, &config).is_err());
    }
}
