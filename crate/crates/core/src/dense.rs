//! Minimal dense-matrix substrate: row-major 2-D arrays of `f64` with
//! matmul (transpose flags, fixed ascending-inner-index summation),
//! row softmax and elementwise activations.
//!
//! This is the reference layer under the sparse kernels and the router, not
//! a BLAS: clarity and bitwise reproducibility over speed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Two operand shapes did not line up for an operation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
pub struct ShapeError {
    pub op: &'static str,
    pub lhs: (usize, usize),
    pub rhs: (usize, usize),
}

impl ShapeError {
    pub fn new(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Self { op, lhs, rhs }
    }
}

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Wrap an existing row-major buffer; `data.len()` must equal `rows*cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::new("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Explicitly materialized transpose. Kernels never call this; it exists
    /// for oracles and tests.
    pub fn transposed(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    /// Element read under a transpose flag, without materializing anything.
    #[inline]
    pub(crate) fn at_t(&self, transposed: bool, r: usize, c: usize) -> f64 {
        if transposed {
            self.at(c, r)
        } else {
            self.at(r, c)
        }
    }

    /// Shape after applying a transpose flag.
    pub(crate) fn shape_t(&self, transposed: bool) -> (usize, usize) {
        if transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Largest absolute elementwise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `a_eff · b_eff` where each operand is optionally transposed.
///
/// The inner reduction always runs in ascending index order, so results are
/// bitwise reproducible and `transpose_a = true` is bitwise equal to passing
/// an explicitly transposed `a`.
pub fn matmul(
    a: &DenseMatrix,
    b: &DenseMatrix,
    transpose_a: bool,
    transpose_b: bool,
) -> Result<DenseMatrix, ShapeError> {
    let (m, ka) = a.shape_t(transpose_a);
    let (kb, n) = b.shape_t(transpose_b);
    if ka != kb {
        return Err(ShapeError::new("matmul", (m, ka), (kb, n)));
    }
    let mut out = DenseMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..ka {
                acc += a.at_t(transpose_a, i, k) * b.at_t(transpose_b, k, j);
            }
            out.data[i * n + j] = acc;
        }
    }
    Ok(out)
}

/// Numerically stable softmax over each row (max subtraction).
pub fn softmax_rows(a: &DenseMatrix) -> DenseMatrix {
    assert!(a.rows > 0 && a.cols > 0, "softmax_rows: empty input");
    let mut out = DenseMatrix::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        let row = a.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out_row = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &x) in out_row.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Elementwise activation kind used by the expert MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Identity,
    Relu,
    Gelu,
}

impl std::str::FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            other => Err(format!("unknown activation kind `{other}`")),
        }
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Identity => "identity",
            Self::Relu => "relu",
            Self::Gelu => "gelu",
        };
        f.write_str(s)
    }
}

/// Whether [`activation`] evaluates the function or its pointwise derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Forward,
    /// Derivative at the given pre-activation values.
    Grad,
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC_COEF: f64 = 0.044_715;

#[inline]
pub(crate) fn activation_scalar(kind: ActivationKind, mode: ActMode, x: f64) -> f64 {
    match (kind, mode) {
        (ActivationKind::Identity, ActMode::Forward) => x,
        (ActivationKind::Identity, ActMode::Grad) => 1.0,
        (ActivationKind::Relu, ActMode::Forward) => x.max(0.0),
        (ActivationKind::Relu, ActMode::Grad) => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        (ActivationKind::Gelu, ActMode::Forward) => {
            let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        (ActivationKind::Gelu, ActMode::Grad) => {
            let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
            let t = u.tanh();
            let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEF * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
    }
}

/// Elementwise activation (tanh-approximation gelu) or its derivative.
///
/// In `Grad` mode the input must hold pre-activation values.
pub fn activation(kind: ActivationKind, a: &DenseMatrix, mode: ActMode) -> DenseMatrix {
    let mut out = a.clone();
    for v in out.data.iter_mut() {
        *v = activation_scalar(kind, mode, *v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_diff_grad;

    // Test-local RNG so fixtures do not depend on any library RNG choices.
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

    // Independent naive-loop reference, deliberately not calling matmul().
    fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        assert_eq!(a.cols(), b.rows());
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.at(i, k) * b.at(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn identity_times_any_2x2_is_identity_map() {
        let a = DenseMatrix::from_vec(2, 2, vec![3.0, -1.5, 0.25, 7.0]).unwrap();
        let got = matmul(&DenseMatrix::identity(2), &a, false, false).unwrap();
        assert_eq!(got, a);
    }

    #[test]
    fn matmul_matches_independent_naive_loop_bitwise() {
        let mut rng = Lcg(17);
        let a = rng.matrix(3, 3);
        let b = rng.matrix(3, 3);
        let got = matmul(&a, &b, false, false).unwrap();
        let want = naive_matmul(&a, &b);
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn transpose_flag_equals_explicit_transpose_bitwise() {
        let mut rng = Lcg(99);
        let a = rng.matrix(4, 3);
        let b = rng.matrix(4, 5);
        let flagged = matmul(&a, &b, true, false).unwrap();
        let explicit = matmul(&a.transposed(), &b, false, false).unwrap();
        assert_eq!(flagged.data(), explicit.data());

        let c = rng.matrix(5, 4);
        let flagged = matmul(&a, &c, true, true).unwrap();
        let explicit = matmul(&a.transposed(), &c.transposed(), false, false).unwrap();
        assert_eq!(flagged.data(), explicit.data());
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(4, 2);
        let err = matmul(&a, &b, false, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(4, 2)"), "{msg}");
    }

    #[test]
    fn matmul_associative_within_1e10_on_random_triples() {
        let mut rng = Lcg(4242);
        for _ in 0..10 {
            let a = rng.matrix(8, 8);
            let b = rng.matrix(8, 8);
            let c = rng.matrix(8, 8);
            let left = matmul(&matmul(&a, &b, false, false).unwrap(), &c, false, false).unwrap();
            let right = matmul(&a, &matmul(&b, &c, false, false).unwrap(), false, false).unwrap();
            assert!(left.max_abs_diff(&right) <= 1e-10);
        }
    }

    #[test]
    fn softmax_symmetric_row_is_half_half() {
        let a = DenseMatrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let s = softmax_rows(&a);
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = DenseMatrix::from_vec(1, 3, vec![0.3, -1.2, 2.5]).unwrap();
        let b = DenseMatrix::from_vec(1, 3, vec![0.3 + 7.0, -1.2 + 7.0, 2.5 + 7.0]).unwrap();
        let sa = softmax_rows(&a);
        let sb = softmax_rows(&b);
        assert!(sa.max_abs_diff(&sb) <= 1e-12);
    }

    #[test]
    fn softmax_of_1_2_3_matches_frozen_values() {
        // Frozen from e^x / sum(e^x) evaluated at high precision.
        let a = DenseMatrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax_rows(&a);
        let want = [0.09003057, 0.24472847, 0.66524096];
        for (got, want) in s.data().iter().zip(want) {
            assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_nonnegative() {
        let mut rng = Lcg(5);
        let a = rng.matrix(7, 9);
        let s = softmax_rows(&a);
        for r in 0..s.rows() {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(s.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn activation_definitional_points() {
        let x = DenseMatrix::from_vec(1, 3, vec![0.0, -2.0, 1.0]).unwrap();
        let gelu = activation(ActivationKind::Gelu, &x, ActMode::Forward);
        assert_eq!(gelu.at(0, 0), 0.0);
        let relu = activation(ActivationKind::Relu, &x, ActMode::Forward);
        assert_eq!(relu.at(0, 1), 0.0);
        let id_grad = activation(ActivationKind::Identity, &x, ActMode::Grad);
        assert!(id_grad.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gelu_at_one_matches_tanh_approximation() {
        let x = DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        let y = activation(ActivationKind::Gelu, &x, ActMode::Forward);
        assert!((y.at(0, 0) - 0.8412).abs() <= 1e-4);
    }

    #[test]
    fn activation_grad_matches_finite_differences() {
        for kind in [ActivationKind::Gelu, ActivationKind::Identity] {
            for x0 in [-1.0, 0.5, 2.0] {
                let grad = activation_scalar(kind, ActMode::Grad, x0);
                let fd = finite_diff_grad(
                    |p| activation_scalar(kind, ActMode::Forward, p[0]),
                    &[x0],
                    1e-6,
                )[0];
                let rel = (grad - fd).abs() / grad.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-6, "{kind} at {x0}: {grad} vs {fd}");
            }
        }
        // relu derivative is exact anywhere away from the kink
        for x0 in [-1.0, 0.5, 2.0] {
            let grad = activation_scalar(ActivationKind::Relu, ActMode::Grad, x0);
            assert_eq!(grad, if x0 > 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn operations_are_deterministic_across_repeat_calls() {
        let mut rng = Lcg(123);
        let a = rng.matrix(6, 4);
        let b = rng.matrix(4, 5);
        let m1 = matmul(&a, &b, false, false).unwrap();
        let m2 = matmul(&a, &b, false, false).unwrap();
        assert_eq!(m1.data(), m2.data());
        let s1 = softmax_rows(&a);
        let s2 = softmax_rows(&a);
        assert_eq!(s1.data(), s2.data());
    }
}
