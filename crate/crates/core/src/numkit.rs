//! Dense linear algebra and stochastic optimization primitives.
//!
//! Everything here is plain `f64` on row-major storage. The matrices in this
//! crate are small (inducing sets of at most a few hundred points), so the
//! implementations favour clarity and determinism over blocked kernels:
//!
//! - [`cholesky`] — lower-triangular factorization with an explicit diagonal
//!   jitter term, plus [`cholesky_auto`] which escalates the jitter through a
//!   fixed ladder before giving up;
//! - [`tri_solve`] — forward/back substitution against a lower factor;
//! - [`AdamState`] / [`adam_step`] — bias-corrected Adam;
//! - [`gauss_hermite`] — Gauss–Hermite nodes and weights for Gaussian
//!   expectations of nonlinear functions.
//!
//! All routines are deterministic: no internal RNG, no platform-dependent
//! reductions.

use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Jitter ladder tried by [`cholesky_auto`]: a plain factorization first,
/// then escalating diagonal inflation.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Number of Cholesky factorizations performed since process start.
///
/// Exposed so tests can verify that cached inference paths never factor
/// anything per query. The counter is monotone and process-global.
static FACTORIZATIONS: AtomicU64 = AtomicU64::new(0);

/// Total number of Cholesky factorizations performed so far by this process.
pub fn factorization_count() -> u64 {
    FACTORIZATIONS.load(Ordering::Relaxed)
}

/// Dense row-major matrix of `f64`.
///
/// Construction asserts that the buffer length matches `rows * cols` and that
/// every entry is finite; all downstream code relies on both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Wrap a row-major buffer.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix buffer length {} does not match {rows}x{cols}",
            data.len()
        );
        assert!(
            data.iter().all(|v| v.is_finite()),
            "matrix entries must be finite"
        );
        Matrix { rows, cols, data }
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from nested rows (test convenience).
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// Borrow row `i` as a slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mutable row access.
    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Flat row-major view of the buffer.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Flat mutable view of the buffer.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Matrix-vector product `self * v`.
    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "mat_vec",
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Dense product `self * other` (used by small precomputations and tests).
    pub fn mat_mul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                context: "mat_mul",
                expected: format!("lhs cols == rhs rows ({})", self.cols),
                got: format!("{}", other.rows),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Validate shape/finiteness after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::ShapeMismatch {
                context: "matrix buffer",
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("len {}", self.data.len()),
            });
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(
                "matrix entries must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared Euclidean distance between two equal-length slices.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lower Cholesky factor `L` of `A + jitter * I`, so that `L * L^T =
/// A + jitter * I`.
///
/// `A` must be square and symmetric; only the lower triangle is read. Fails
/// with [`Error::NotPositiveDefinite`] if a pivot is not strictly positive.
pub fn cholesky(a: &Matrix, jitter: f64) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::ShapeMismatch {
            context: "cholesky",
            expected: format!("{n}x{n}"),
            got: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    FACTORIZATIONS.fetch_add(1, Ordering::Relaxed);
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::NotPositiveDefinite {
                        pivot: s,
                        index: i,
                        jitter,
                    });
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Cholesky with automatic jitter escalation.
///
/// Tries a plain factorization first, then inflates the diagonal through
/// [`JITTER_LADDER`]. Returns the factor together with the jitter that
/// succeeded; fails with the last [`Error::NotPositiveDefinite`] if even
/// the largest jitter cannot rescue the matrix.
pub fn cholesky_auto(a: &Matrix) -> Result<(Matrix, f64)> {
    let mut last = None;
    for &jitter in &JITTER_LADDER {
        match cholesky(a, jitter) {
            Ok(l) => return Ok((l, jitter)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("jitter ladder is non-empty"))
}

/// Solve `L x = b` (or `L^T x = b` when `transposed`) for lower-triangular `L`.
pub fn tri_solve(l: &Matrix, b: &[f64], transposed: bool) -> Result<Vec<f64>> {
    let n = l.rows();
    if l.cols() != n {
        return Err(Error::ShapeMismatch {
            context: "tri_solve",
            expected: format!("{n}x{n}"),
            got: format!("{}x{}", l.rows(), l.cols()),
        });
    }
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            context: "tri_solve",
            expected: n,
            got: b.len(),
        });
    }
    for i in 0..n {
        if l.get(i, i) == 0.0 {
            return Err(Error::SingularTriangular { index: i });
        }
    }
    let mut x = vec![0.0; n];
    if !transposed {
        for i in 0..n {
            let mut s = b[i];
            for j in 0..i {
                s -= l.get(i, j) * x[j];
            }
            x[i] = s / l.get(i, i);
        }
    } else {
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= l.get(j, i) * x[j];
            }
            x[i] = s / l.get(i, i);
        }
    }
    Ok(x)
}

/// Solve `(L L^T) x = b` with two triangular solves.
pub fn chol_solve(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let y = tri_solve(l, b, false)?;
    tri_solve(l, &y, true)
}

/// Explicit inverse of `L L^T`, built column by column from the factor.
///
/// Only used by precomputation steps (never per query); output is
/// symmetrized to remove round-off asymmetry.
pub fn chol_inverse(l: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = chol_solve(l, &e)?;
        e[j] = 0.0;
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
    }
    // Symmetrize: the exact inverse is symmetric, round-off is not.
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (inv.get(i, j) + inv.get(j, i));
            inv.set(i, j, s);
            inv.set(j, i, s);
        }
    }
    Ok(inv)
}

/// Log-determinant of `L L^T` from the Cholesky factor.
pub fn chol_log_det(l: &Matrix) -> f64 {
    (0..l.rows()).map(|i| l.get(i, i).ln()).sum::<f64>() * 2.0
}

/// State for bias-corrected Adam over one flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    /// Fresh state with the standard moment decays (0.9, 0.999) and
    /// epsilon 1e-8. The learning rate is the caller's to choose.
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Override the moment decays and epsilon.
    pub fn with_hyperparams(mut self, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        assert!((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2));
        assert!(epsilon > 0.0);
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.epsilon = epsilon;
        self
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Number of steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First-moment accumulator (for inspection in tests).
    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    /// Second-moment accumulator (for inspection in tests).
    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

/// One bias-corrected Adam update, in place:
///
/// ```text
/// m <- b1 m + (1-b1) g        v <- b2 v + (1-b2) g^2
/// p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
/// ```
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            context: "adam_step",
            expected: format!("params/grads/state of len {}", state.m.len()),
            got: format!("params {}, grads {}", params.len(), grads.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(sigmoid(t))`, finite for any finite `t`.
#[inline]
pub fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

/// Gauss–Hermite nodes and weights for `n` points.
///
/// Convention: for weight function `exp(-x^2)`,
///
/// ```text
/// integral exp(-x^2) f(x) dx  ~=  sum_i w_i f(x_i)
/// ```
///
/// so a Gaussian expectation `E[f(z)]` with `z ~ N(mu, s2)` becomes
/// `pi^{-1/2} * sum_i w_i f(mu + sqrt(2 s2) x_i)`. Nodes are found by Newton
/// iteration on the orthonormal Hermite recurrence; `n = 20` is exact for
/// polynomials up to degree 39.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one quadrature node");
    const EPS: f64 = 3e-14;
    const MAX_ITER: usize = 64;
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let nf = n as f64;
    let half = n.div_ceil(2);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut z = 0.0_f64;
    for i in 0..half {
        // Initial guesses for roots in descending order.
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut dpoly = 0.0;
        for _ in 0..MAX_ITER {
            // Evaluate the orthonormal Hermite polynomial at z by recurrence.
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            dpoly = (2.0 * nf).sqrt() * p2;
            let z_prev = z;
            z -= p1 / dpoly;
            if (z - z_prev).abs() <= EPS {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (dpoly * dpoly);
        weights[n - 1 - i] = weights[i];
    }
    (nodes, weights)
}
