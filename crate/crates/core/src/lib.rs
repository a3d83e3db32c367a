//! Block-sparse dropless mixture-of-experts, from the format up.
//!
//! The crate is organized bottom-up:
//!
//! * [`dense`] — row-major `f64` matrices with matmul, softmax and
//!   activations; the substrate everything else computes on.
//! * [`bcsr`] — the hybrid blocked-CSR-COO sparse format with a secondary
//!   index for transposed iteration.
//! * [`kernels`] — the SDD / DSD / DDS product family over that format,
//!   with all transpose-flag combinations and deterministic parallelism.
//! * [`moe`] — router, permutation plans, block-diagonal topologies, the
//!   dropless MoE layer (forward + manual backward), a token-dropping
//!   baseline and the load-balancing auxiliary loss.
//! * [`oracles`] — independent brute-force references used by tests and
//!   the validation CLI.
//! * [`trainer`] — synthetic clustered-regression task, Adam, and a toy
//!   training loop.
//!
//! All computation is deterministic: reruns and different worker counts
//! produce bitwise-identical results (see [`parallel`]).

pub mod bcsr;
pub mod dense;
pub mod kernels;
pub mod moe;
pub mod oracles;
pub mod parallel;
pub mod rng;
pub mod trainer;

pub use bcsr::{BlockSparseMatrix, BlockTopology};
pub use dense::{ActMode, ActivationKind, DenseMatrix, ShapeError};
pub use moe::{CapacityMode, MoEConfig, MoEGrads, MoEWeights, PermutationPlan, RouterAssignment};
