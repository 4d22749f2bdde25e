//! RBF kernel over the learned hidden space, with analytic gradients.
//!
//! The covariance between two hidden points is
//!
//! ```text
//! k(h1, h2) = a^2 * exp(-||h1 - h2||^2 / (2 l^2))
//! ```
//!
//! Amplitude `a` and lengthscale `l` are stored as logs so gradient-based
//! training can never push them negative. Whether they are actually trained
//! is a run-configuration choice; the gradients are always available.
//!
//! The prior mean over hidden space is either zero or a constant. A positive
//! constant makes unexplored regions look promising (their posterior mean
//! reverts to the constant), which is an exploration device for greedy
//! strategies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{sq_dist, Matrix};

/// Log-parameterized RBF kernel hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfParams {
    pub log_amplitude: f64,
    pub log_lengthscale: f64,
}

impl RbfParams {
    /// Construct from the natural (positive) amplitude and lengthscale.
    pub fn new(amplitude: f64, lengthscale: f64) -> Self {
        assert!(
            amplitude > 0.0 && lengthscale > 0.0,
            "kernel hyperparameters must be positive"
        );
        RbfParams {
            log_amplitude: amplitude.ln(),
            log_lengthscale: lengthscale.ln(),
        }
    }

    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp()
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    /// `a^2`, the prior variance at any point.
    pub fn amplitude_sq(&self) -> f64 {
        (2.0 * self.log_amplitude).exp()
    }

    /// `l^2`.
    pub fn lengthscale_sq(&self) -> f64 {
        (2.0 * self.log_lengthscale).exp()
    }
}

/// Prior mean function over hidden space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MeanFn {
    /// `m(h) = 0` — the usual default.
    Zero,
    /// `m(h) = c` everywhere (optimistic when `c > 0`).
    Constant(f64),
}

impl MeanFn {
    pub fn value(&self) -> f64 {
        match self {
            MeanFn::Zero => 0.0,
            MeanFn::Constant(c) => *c,
        }
    }
}

/// Kernel value between two hidden points.
pub fn rbf(h1: &[f64], h2: &[f64], params: &RbfParams) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(Error::DimensionMismatch {
            context: "rbf",
            expected: h1.len(),
            got: h2.len(),
        });
    }
    let q = sq_dist(h1, h2);
    Ok(params.amplitude_sq() * (-q / (2.0 * params.lengthscale_sq())).exp())
}

/// Cross-covariance matrix `K[i][j] = k(rows_a[i], rows_b[j])`.
pub fn kernel_matrix(a: &Matrix, b: &Matrix, params: &RbfParams) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            context: "kernel_matrix",
            expected: a.cols(),
            got: b.cols(),
        });
    }
    let a2 = params.amplitude_sq();
    let inv_2l2 = 1.0 / (2.0 * params.lengthscale_sq());
    let mut k = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ri = a.row(i);
        for j in 0..b.rows() {
            let q = sq_dist(ri, b.row(j));
            k.set(i, j, a2 * (-q * inv_2l2).exp());
        }
    }
    Ok(k)
}

/// Partial derivatives of [`rbf`] with respect to `h1` and the log
/// hyperparameters.
#[derive(Debug, Clone)]
pub struct RbfGrads {
    /// `dk/dh1` (an equally long vector; `dk/dh2` is its negation).
    pub wrt_h1: Vec<f64>,
    /// `dk/d(log a) = 2k`.
    pub wrt_log_amplitude: f64,
    /// `dk/d(log l) = k * ||h1-h2||^2 / l^2`.
    pub wrt_log_lengthscale: f64,
}

/// Kernel value together with its analytic gradients.
pub fn rbf_grads(h1: &[f64], h2: &[f64], params: &RbfParams) -> Result<(f64, RbfGrads)> {
    let k = rbf(h1, h2, params)?;
    let l2 = params.lengthscale_sq();
    let q = sq_dist(h1, h2);
    let wrt_h1 = h1
        .iter()
        .zip(h2)
        .map(|(x1, x2)| -k * (x1 - x2) / l2)
        .collect();
    Ok((
        k,
        RbfGrads {
            wrt_h1,
            wrt_log_amplitude: 2.0 * k,
            wrt_log_lengthscale: k * q / l2,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::cholesky;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "expected {a} ~= {b} within {tol}, diff {}",
            (a - b).abs()
        );
    }

    #[test]
    fn zero_distance_gives_amplitude_squared() {
        let p = RbfParams::new(0.3, 2.0);
        let h = [0.7, -1.2];
        assert_close(rbf(&h, &h, &p).unwrap(), 0.09, 1e-15);
    }

    #[test]
    fn unit_distance_unit_hyperparams() {
        let p = RbfParams::new(1.0, 1.0);
        let k = rbf(&[0.0], &[1.0], &p).unwrap();
        assert_close(k, (-0.5_f64).exp(), 1e-15);
        assert_close(k, 0.606_530_659_712_633_4, 1e-12);
    }

    #[test]
    fn far_points_decorrelate() {
        let p = RbfParams::new(1.0, 1.0);
        let k = rbf(&[0.0, 0.0], &[80.0, 0.0], &p).unwrap();
        assert!(k < 1e-12);
    }

    #[test]
    fn kernel_is_exactly_symmetric() {
        let p = RbfParams::new(0.7, 1.3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let h1: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h2: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            // Bitwise equality: (x-y)^2 and (y-x)^2 agree exactly in IEEE 754.
            assert_eq!(rbf(&h1, &h2, &p).unwrap(), rbf(&h2, &h1, &p).unwrap());
        }
    }

    #[test]
    fn kernel_matrix_single_point() {
        let p = RbfParams::new(0.5, 1.0);
        let h = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let k = kernel_matrix(&h, &h, &p).unwrap();
        assert_eq!((k.rows(), k.cols()), (1, 1));
        assert_close(k.get(0, 0), 0.25, 1e-15);
    }

    #[test]
    fn kernel_matrix_matches_entrywise_rbf() {
        let p = RbfParams::new(0.9, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix::new(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = Matrix::new(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let k = kernel_matrix(&a, &b, &p).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(k.get(i, j), rbf(a.row(i), b.row(j), &p).unwrap());
            }
        }
    }

    #[test]
    fn coincident_rows_give_equal_matrix_rows() {
        let p = RbfParams::new(1.0, 1.0);
        let h = Matrix::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4], vec![-1.0, 0.0]]);
        let k = kernel_matrix(&h, &h, &p).unwrap();
        for j in 0..3 {
            assert_eq!(k.get(0, j), k.get(1, j));
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = RbfParams::new(1.0, 1.0);
        assert!(matches!(
            rbf(&[0.0, 1.0], &[0.0], &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gradient_at_coincident_points_is_zero_in_h() {
        let p = RbfParams::new(0.6, 1.5);
        let h = [0.2, -0.4, 1.0];
        let (k, g) = rbf_grads(&h, &h, &p).unwrap();
        assert!(g.wrt_h1.iter().all(|&v| v == 0.0));
        assert_close(g.wrt_log_amplitude, 2.0 * k, 1e-15);
        assert_close(g.wrt_log_lengthscale, 0.0, 1e-15);
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h_fd = 1e-5;
        for _ in 0..40 {
            let p = RbfParams {
                log_amplitude: rng.random_range(-1.0..0.5),
                log_lengthscale: rng.random_range(-0.7..0.7),
            };
            let h1: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let h2: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let (_, g) = rbf_grads(&h1, &h2, &p).unwrap();

            let check = |analytic: f64, fd: f64| {
                let denom = analytic.abs().max(fd.abs()).max(1.0);
                assert!(
                    (analytic - fd).abs() / denom <= 1e-6,
                    "gradient mismatch: analytic {analytic}, fd {fd}"
                );
            };

            for d in 0..2 {
                let mut hp = h1.clone();
                let mut hm = h1.clone();
                hp[d] += h_fd;
                hm[d] -= h_fd;
                let fd =
                    (rbf(&hp, &h2, &p).unwrap() - rbf(&hm, &h2, &p).unwrap()) / (2.0 * h_fd);
                check(g.wrt_h1[d], fd);
            }
            let pa = RbfParams {
                log_amplitude: p.log_amplitude + h_fd,
                ..p
            };
            let ma = RbfParams {
                log_amplitude: p.log_amplitude - h_fd,
                ..p
            };
            let fd_a =
                (rbf(&h1, &h2, &pa).unwrap() - rbf(&h1, &h2, &ma).unwrap()) / (2.0 * h_fd);
            check(g.wrt_log_amplitude, fd_a);
            let pl = RbfParams {
                log_lengthscale: p.log_lengthscale + h_fd,
                ..p
            };
            let ml = RbfParams {
                log_lengthscale: p.log_lengthscale - h_fd,
                ..p
            };
            let fd_l =
                (rbf(&h1, &h2, &pl).unwrap() - rbf(&h1, &h2, &ml).unwrap()) / (2.0 * h_fd);
            check(g.wrt_log_lengthscale, fd_l);
        }
    }

    #[test]
    fn kernel_matrix_with_jitter_is_positive_definite() {
        let p = RbfParams::new(1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &n in &[2usize, 16, 64] {
            let h = Matrix::new(
                n,
                3,
                (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect(),
            );
            let mut k = kernel_matrix(&h, &h, &p).unwrap();
            for i in 0..n {
                k.set(i, i, k.get(i, i) + 1e-8);
            }
            assert!(cholesky(&k, 0.0).is_ok(), "kernel matrix n={n} not PD");
        }
    }
}
