//! Toy-scale end-to-end training on a synthetic clustered regression task.
//!
//! Tokens are drawn from a handful of clusters whose frequencies follow a
//! Zipf law; the target for a token from cluster `c` is `M_c · x` for a fixed
//! random linear map, so expert specialization (one expert per cluster) is
//! the optimal solution. Everything is deterministic given the seed.

use thiserror::Error;

use crate::dense::DenseMatrix;
use crate::moe::{
    dmoe_forward, dropping_forward, load_balance_loss, router_backward, CapacityMode, MoEConfig,
    MoEWeights, MoeError,
};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("loss diverged (non-finite) at step {step}")]
    Diverged { step: usize },

    #[error("parameter/gradient length mismatch: {params} vs {grads}")]
    AdamShape { params: usize, grads: usize },

    #[error(transparent)]
    Moe(#[from] MoeError),
}

/// Synthetic clustered-regression task parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTaskConfig {
    pub num_clusters: usize,
    pub tokens_per_batch: usize,
    pub hidden_size: usize,
    pub noise_std: f64,
    /// Zipf exponent for cluster frequencies; 0 means uniform.
    pub skew: f64,
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        Self {
            num_clusters: 4,
            tokens_per_batch: 256,
            hidden_size: 16,
            noise_std: 0.1,
            skew: 0.0,
            seed: 42,
        }
    }
}

// Stream ids carved out of the task seed.
const STREAM_STRUCTURE: u64 = 1;
const STREAM_BATCH_BASE: u64 = 1 << 32;

/// Cluster assignment by quota: token `i` goes to the cluster whose assigned
/// count runs furthest behind its Zipf-weighted share of `i + 1` tokens, ties
/// to the lower index. Deficits are recomputed from scratch each step, so
/// equal weights give an exactly periodic round-robin and skewed weights
/// track their target frequencies to within one token.
fn cluster_sequence(num_clusters: usize, skew: f64, len: usize) -> Vec<usize> {
    let weights: Vec<f64> = (0..num_clusters)
        .map(|c| ((c + 1) as f64).powf(-skew))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut assigned = vec![0usize; num_clusters];
    let mut seq = Vec::with_capacity(len);
    for i in 0..len {
        let quota = (i + 1) as f64;
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (c, &w) in weights.iter().enumerate() {
            let deficit = w / total * quota - assigned[c] as f64;
            if deficit > best_deficit {
                best = c;
                best_deficit = deficit;
            }
        }
        assigned[best] += 1;
        seq.push(best);
    }
    seq
}

/// One deterministic batch: `x` rows are cluster centroids plus gaussian
/// noise, targets are the per-cluster linear map applied to the noisy input.
pub fn synth_batch(cfg: &SynthTaskConfig, step: usize) -> (DenseMatrix, DenseMatrix) {
    assert!(cfg.num_clusters >= 1 && cfg.hidden_size >= 1 && cfg.tokens_per_batch >= 1);
    let h = cfg.hidden_size;

    // Cluster structure is a function of the seed only, not the step.
    let mut structure = Stream::new(cfg.seed, STREAM_STRUCTURE);
    let centroids = DenseMatrix::from_fn(cfg.num_clusters, h, |_, _| structure.gaussian());
    let scale = 1.0 / (h as f64).sqrt();
    let maps: Vec<DenseMatrix> = (0..cfg.num_clusters)
        .map(|_| DenseMatrix::from_fn(h, h, |_, _| structure.gaussian() * scale))
        .collect();

    let clusters = cluster_sequence(cfg.num_clusters, cfg.skew, cfg.tokens_per_batch);
    let mut noise = Stream::new(cfg.seed, STREAM_BATCH_BASE + step as u64);
    let mut x = DenseMatrix::zeros(cfg.tokens_per_batch, h);
    let mut target = DenseMatrix::zeros(cfg.tokens_per_batch, h);
    for (t, &c) in clusters.iter().enumerate() {
        for j in 0..h {
            x.set(t, j, centroids.at(c, j) + cfg.noise_std * noise.gaussian());
        }
        for j in 0..h {
            let mut acc = 0.0;
            for k in 0..h {
                acc += maps[c].at(j, k) * x.at(t, k);
            }
            target.set(t, j, acc);
        }
    }
    (x, target)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::AdamShape {
            params: params.len(),
            grads: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Overflow policy for a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    Dropless,
    Capacity(f64),
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean squared error against the regression target.
    pub loss: f64,
    pub aux_loss: f64,
    /// Tokens routed to each expert (all slots, before any dropping).
    pub expert_counts: Vec<usize>,
    pub drop_fraction: f64,
}

impl StepMetrics {
    pub fn max_expert_load(&self) -> usize {
        self.expert_counts.iter().copied().max().unwrap_or(0)
    }
}

/// Train an MoE regressor on the synthetic task. The objective is
/// `MSE + aux loss`; both terms backpropagate into the router.
pub fn train_loop(
    model: &MoEConfig,
    task: &SynthTaskConfig,
    hp: &AdamParams,
    steps: usize,
    mode: TrainMode,
) -> Result<Vec<StepMetrics>, TrainError> {
    let config = MoEConfig {
        capacity_factor: match mode {
            TrainMode::Dropless => CapacityMode::Dropless,
            TrainMode::Capacity(f) => CapacityMode::Factor(f),
        },
        ..model.clone()
    };
    config.validate()?;
    assert_eq!(
        task.hidden_size, config.hidden_size,
        "task and model hidden sizes must agree"
    );

    let mut w = MoEWeights::random(&config, task.seed);
    let mut st_router = AdamState::new(w.router_w.data().len());
    let mut st_w1 = AdamState::new(w.w1.data().len());
    let mut st_w2 = AdamState::new(w.w2.data().len());

    let mut metrics = Vec::with_capacity(steps);
    for step in 0..steps {
        let (x, target) = synth_batch(task, step);
        let tokens = x.rows();

        let (y, cache, drop_fraction) = match config.capacity_factor {
            CapacityMode::Dropless => {
                let (y, cache) = dmoe_forward(&x, &w, &config)?;
                (y, cache, 0.0)
            }
            CapacityMode::Factor(_) => {
                let (y, cache, stats) = dropping_forward(&x, &w, &config)?;
                (y, cache, stats.overall_fraction)
            }
        };

        // MSE over all elements plus the auxiliary balance loss.
        let n = (tokens * config.hidden_size) as f64;
        let mut loss = 0.0;
        let mut dy = DenseMatrix::zeros(tokens, config.hidden_size);
        for i in 0..dy.data().len() {
            let diff = y.data()[i] - target.data()[i];
            loss += diff * diff;
            dy.data_mut()[i] = 2.0 * diff / n;
        }
        loss /= n;
        let (aux_loss, aux_dprobs) = load_balance_loss(cache.assignment(), &config);
        if !(loss + aux_loss).is_finite() {
            return Err(TrainError::Diverged { step });
        }

        let (_, mut grads) = crate::moe::dmoe_backward(&dy, &cache, &w)?;
        let (aux_router, _aux_dx) =
            router_backward(&x, &w.router_w, cache.assignment().probs(), &aux_dprobs)?;
        for (g, a) in grads.router_w.data_mut().iter_mut().zip(aux_router.data()) {
            *g += a;
        }

        metrics.push(StepMetrics {
            step,
            loss,
            aux_loss,
            expert_counts: cache.assignment().assigned_counts(),
            drop_fraction,
        });

        adam_step(
            w.router_w.data_mut(),
            grads.router_w.data(),
            &mut st_router,
            hp,
        )?;
        adam_step(w.w1.data_mut(), grads.w1.data(), &mut st_w1, hp)?;
        adam_step(w.w2.data_mut(), grads.w2.data(), &mut st_w2, hp)?;
    }
    Ok(metrics)
}
