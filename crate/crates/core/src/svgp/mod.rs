//! Sparse variational Gaussian-process CTR model over the learned hidden
//! space.
//!
//! The latent click-through function gets a GP prior with the RBF kernel
//! from [`crate::kernel`] applied to hidden vectors produced by
//! [`crate::mapping`]. Inference is sparse and variational: `M` inducing
//! points `Z` live directly in hidden space and carry a Gaussian
//! `q(u) = N(v, S)` with diagonal `S`. The predictive posterior at a hidden
//! point `h` is
//!
//! ```text
//! mu(h)     = m(h) + k(h,Z) K^-1 (v - m(Z))
//! sigma2(h) = k(h,h) - k(h,Z) K^-1 (K - S) K^-1 k(h,Z)^T
//! ```
//!
//! with `K = k(Z,Z)`. Because `Z`, `v`, `S` change only at training time,
//! the two `K^-1` products can be precomputed once per refit into an
//! [`InferenceCache`] (`alpha1`, `alpha2`); each query then costs one kernel
//! row plus a quadratic form — no factorization per query.
//!
//! Expectations of the Bernoulli log likelihood under the posterior are
//! one-dimensional Gaussian integrals evaluated with 20-node Gauss–Hermite
//! quadrature.
//!
//! Training (the tempered evidence bound, the inducing-point clustering
//! regularizer, and full analytic gradients) lives in [`train`], re-exported
//! here.

mod train;

pub use train::{
    kmeans, total_loss, FitReport, LossGrads, LossValue, TauMode, TrainConfig,
};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, rbf, MeanFn, RbfParams};
use crate::mapping::{forward, MappingParams, SparseFeature};
use crate::numkit::{
    chol_inverse, chol_log_det, chol_solve, cholesky_auto, dot, gauss_hermite, log_sigmoid,
    sigmoid, sq_dist, Matrix,
};

/// Variational parameters of the sparse GP.
///
/// The `version` counter increments on every mutation and is what keeps
/// [`InferenceCache`] honest: a cache built at one version refuses to serve
/// a state at another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    /// Inducing points in hidden space, `M x d'`.
    pub inducing: Matrix,
    /// Variational mean `v`, length `M`.
    pub mean: Vec<f64>,
    /// Log of the diagonal of the variational covariance `S`, length `M`.
    pub s_log: Vec<f64>,
    version: u64,
}

impl VariationalState {
    /// Fresh state: `v = 0` and `S = a^2 / 2` on the diagonal, i.e. the
    /// variational covariance starts at half the prior variance.
    pub fn init(inducing: Matrix, kernel: &RbfParams) -> Self {
        let m = inducing.rows();
        let s0 = (0.5 * kernel.amplitude_sq()).ln();
        VariationalState {
            inducing,
            mean: vec![0.0; m],
            s_log: vec![s0; m],
            version: 0,
        }
    }

    /// Number of inducing points.
    pub fn num_inducing(&self) -> usize {
        self.inducing.rows()
    }

    /// Current state version (monotone).
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Record a mutation. Anything that touches `inducing`, `mean`, `s_log`
    /// or the kernel the state is paired with must call this.
    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn validate(&self) -> Result<()> {
        self.inducing.validate()?;
        let m = self.inducing.rows();
        if self.mean.len() != m || self.s_log.len() != m {
            return Err(Error::ShapeMismatch {
                context: "variational state",
                expected: format!("mean/s_log of len {m}"),
                got: format!("{}/{}", self.mean.len(), self.s_log.len()),
            });
        }
        if m == 0 {
            return Err(Error::InvalidConfig(
                "at least one inducing point is required".into(),
            ));
        }
        Ok(())
    }
}

/// A one-dimensional Gaussian posterior over the latent CTR logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorGaussian {
    pub mu: f64,
    /// Predictive variance, clamped at zero (cancellation can produce tiny
    /// negatives; see [`predict_full`] for the clamp signal).
    pub sigma2: f64,
}

impl PosteriorGaussian {
    /// Posterior expected CTR `E[sigmoid(f)]` under this Gaussian — the
    /// model's calibrated point prediction, averaging over uncertainty
    /// rather than plugging in the mean.
    pub fn expected_ctr(&self) -> f64 {
        if self.sigma2 <= 0.0 {
            return sigmoid(self.mu);
        }
        let (nodes, weights) = gh20();
        let scale = (2.0 * self.sigma2).sqrt();
        let mut acc = 0.0;
        for (x, w) in nodes.iter().zip(weights) {
            acc += w * sigmoid(self.mu + scale * x);
        }
        acc * INV_SQRT_PI
    }
}

const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Shared 20-node Gauss–Hermite table.
fn gh20() -> (&'static [f64], &'static [f64]) {
    static TABLE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    let (n, w) = TABLE.get_or_init(|| gauss_hermite(20));
    (n, w)
}

/// Exact posterior at one hidden point via Cholesky solves (no explicit
/// inverse anywhere on this path). Returns the posterior and whether the
/// variance had to be clamped up to zero.
pub fn predict_full(
    h_star: &[f64],
    state: &VariationalState,
    kernel: &RbfParams,
    mean: &MeanFn,
) -> Result<(PosteriorGaussian, bool)> {
    state.validate()?;
    let m = state.num_inducing();
    if h_star.len() != state.inducing.cols() {
        return Err(Error::DimensionMismatch {
            context: "predict",
            expected: state.inducing.cols(),
            got: h_star.len(),
        });
    }
    let kmat = kernel_matrix(&state.inducing, &state.inducing, kernel)?;
    let (lfac, _) = cholesky_auto(&kmat)?;
    let mut beta = Vec::with_capacity(m);
    for i in 0..m {
        beta.push(rbf(h_star, state.inducing.row(i), kernel)?);
    }
    let gamma = chol_solve(&lfac, &beta)?;
    let m_const = mean.value();
    let r: Vec<f64> = state.mean.iter().map(|v| v - m_const).collect();
    let mu = m_const + dot(&gamma, &r);
    let mut sigma2 = kernel.amplitude_sq() - dot(&beta, &gamma);
    for i in 0..m {
        sigma2 += state.s_log[i].exp() * gamma[i] * gamma[i];
    }
    let clamped = sigma2 < 0.0;
    Ok((
        PosteriorGaussian {
            mu,
            sigma2: sigma2.max(0.0),
        },
        clamped,
    ))
}

/// [`predict_full`] without the clamp signal.
pub fn predict(
    h_star: &[f64],
    state: &VariationalState,
    kernel: &RbfParams,
    mean: &MeanFn,
) -> Result<PosteriorGaussian> {
    predict_full(h_star, state, kernel, mean).map(|(p, _)| p)
}

/// Precomputed inference quantities:
///
/// ```text
/// alpha1 = K^-1 (v - m(Z))            (length M)
/// alpha2 = K^-1 (K - S) K^-1          (M x M, symmetric)
/// ```
///
/// plus snapshots of everything a query needs (`Z`, kernel, mean), so a
/// cached prediction is `O(M d' + M^2)` with no factorization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceCache {
    pub alpha1: Vec<f64>,
    pub alpha2: Matrix,
    pub inducing: Matrix,
    pub kernel: RbfParams,
    pub mean: MeanFn,
    built_version: u64,
}

impl InferenceCache {
    pub fn built_version(&self) -> u64 {
        self.built_version
    }
}

/// Build the cache for the current state. `O(M^3)` — done once per refit.
pub fn build_cache(
    state: &VariationalState,
    kernel: &RbfParams,
    mean: &MeanFn,
) -> Result<InferenceCache> {
    state.validate()?;
    let m = state.num_inducing();
    let kmat = kernel_matrix(&state.inducing, &state.inducing, kernel)?;
    let (lfac, _) = cholesky_auto(&kmat)?;
    let kinv = chol_inverse(&lfac)?;
    let m_const = mean.value();
    let r: Vec<f64> = state.mean.iter().map(|v| v - m_const).collect();
    let alpha1 = kinv.mat_vec(&r)?;
    // alpha2 = K^-1 - K^-1 S K^-1 with diagonal S.
    let s: Vec<f64> = state.s_log.iter().map(|x| x.exp()).collect();
    let mut alpha2 = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let mut ksk = 0.0;
            for k in 0..m {
                ksk += kinv.get(i, k) * s[k] * kinv.get(k, j);
            }
            let val = kinv.get(i, j) - ksk;
            alpha2.set(i, j, val);
            alpha2.set(j, i, val);
        }
    }
    Ok(InferenceCache {
        alpha1,
        alpha2,
        inducing: state.inducing.clone(),
        kernel: *kernel,
        mean: *mean,
        built_version: state.version(),
    })
}

/// Posterior at one hidden point from the cache. Per query this computes one
/// kernel row against the inducing snapshot and one quadratic form — nothing
/// cubic in `M`. `current_version` is the live state's version; a mismatch
/// with the cache build version is a [`Error::StaleCache`] error.
pub fn cached_predict_full(
    h_star: &[f64],
    cache: &InferenceCache,
    current_version: u64,
) -> Result<(PosteriorGaussian, bool)> {
    if cache.built_version != current_version {
        return Err(Error::StaleCache {
            built: cache.built_version,
            current: current_version,
        });
    }
    let m = cache.inducing.rows();
    if h_star.len() != cache.inducing.cols() {
        return Err(Error::DimensionMismatch {
            context: "cached_predict",
            expected: cache.inducing.cols(),
            got: h_star.len(),
        });
    }
    let a2 = cache.kernel.amplitude_sq();
    let inv_2l2 = 1.0 / (2.0 * cache.kernel.lengthscale_sq());
    let mut beta = Vec::with_capacity(m);
    for i in 0..m {
        let q = sq_dist(h_star, cache.inducing.row(i));
        beta.push(a2 * (-q * inv_2l2).exp());
    }
    let mu = cache.mean.value() + dot(&beta, &cache.alpha1);
    let mut quad = 0.0;
    for i in 0..m {
        quad += beta[i] * dot(cache.alpha2.row(i), &beta);
    }
    let sigma2 = a2 - quad;
    let clamped = sigma2 < 0.0;
    Ok((
        PosteriorGaussian {
            mu,
            sigma2: sigma2.max(0.0),
        },
        clamped,
    ))
}

/// [`cached_predict_full`] without the clamp signal.
pub fn cached_predict(
    h_star: &[f64],
    cache: &InferenceCache,
    current_version: u64,
) -> Result<PosteriorGaussian> {
    cached_predict_full(h_star, cache, current_version).map(|(p, _)| p)
}

/// KL divergence `KL[q(u) || p(u)]` between the variational Gaussian
/// `N(v, S)` and the GP prior `N(m(Z), K)`:
///
/// ```text
/// 0.5 [ tr(K^-1 S) + (m - v)^T K^-1 (m - v) - M + ln det K - ln det S ]
/// ```
pub fn kl_q_p(state: &VariationalState, kernel: &RbfParams, mean: &MeanFn) -> Result<f64> {
    state.validate()?;
    let m = state.num_inducing();
    let kmat = kernel_matrix(&state.inducing, &state.inducing, kernel)?;
    let (lfac, _) = cholesky_auto(&kmat)?;
    let kinv = chol_inverse(&lfac)?;
    let m_const = mean.value();
    let r: Vec<f64> = state.mean.iter().map(|v| v - m_const).collect();
    let alpha1 = kinv.mat_vec(&r)?;
    let mut trace = 0.0;
    let mut log_det_s = 0.0;
    for i in 0..m {
        trace += state.s_log[i].exp() * kinv.get(i, i);
        log_det_s += state.s_log[i];
    }
    Ok(0.5 * (trace + dot(&r, &alpha1) - m as f64 + chol_log_det(&lfac) - log_det_s))
}

/// `E[log Bernoulli(y; sigmoid(f))]` for `f ~ N(mu, sigma2)` by 20-node
/// Gauss–Hermite quadrature. Exact (up to the log-sigmoid itself) when
/// `sigma2 = 0`.
pub fn expected_log_lik(y: u8, posterior: &PosteriorGaussian) -> f64 {
    expected_log_lik_grads(y, posterior.mu, posterior.sigma2).0
}

/// Same integral with an arbitrary node count (used to check convergence).
pub fn expected_log_lik_with_nodes(y: u8, posterior: &PosteriorGaussian, n: usize) -> f64 {
    let (nodes, weights) = gauss_hermite(n);
    let sign = if y == 1 { 1.0 } else { -1.0 };
    if posterior.sigma2 <= 0.0 {
        return log_sigmoid(sign * posterior.mu);
    }
    let scale = (2.0 * posterior.sigma2).sqrt();
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        acc += w * log_sigmoid(sign * (posterior.mu + scale * x));
    }
    acc * INV_SQRT_PI
}

/// Value and partial derivatives `(E, dE/dmu, dE/dsigma2)` of the expected
/// Bernoulli log likelihood. The `sigma2 = 0` limit is handled analytically
/// so the degenerate case is exact.
pub fn expected_log_lik_grads(y: u8, mu: f64, sigma2: f64) -> (f64, f64, f64) {
    let sign = if y == 1 { 1.0 } else { -1.0 };
    if sigma2 <= 0.0 {
        let value = log_sigmoid(sign * mu);
        let d_mu = sign * sigmoid(-sign * mu);
        // Limit of dE/dsigma2 as sigma2 -> 0 is half the second mu-derivative.
        let d_sigma2 = -0.5 * sigmoid(mu) * sigmoid(-mu);
        return (value, d_mu, d_sigma2);
    }
    let (nodes, weights) = gh20();
    let scale = (2.0 * sigma2).sqrt();
    let mut value = 0.0;
    let mut d_mu = 0.0;
    let mut d_scale_dir = 0.0;
    for (x, w) in nodes.iter().zip(weights) {
        let f = mu + scale * x;
        value += w * log_sigmoid(sign * f);
        let slope = sign * sigmoid(-sign * f);
        d_mu += w * slope;
        d_scale_dir += w * slope * x;
    }
    (
        value * INV_SQRT_PI,
        d_mu * INV_SQRT_PI,
        d_scale_dir * INV_SQRT_PI / scale,
    )
}

/// Mean squared distance from each mapped batch point to its nearest
/// inducing point (ties broken toward the lowest index). This is the
/// regularizer that keeps the inducing set on top of where the data lives
/// in hidden space.
pub fn clustering_reg(
    batch: &[(SparseFeature, u8)],
    mapping: &MappingParams,
    inducing: &Matrix,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = 0.0;
    for (x, _) in batch {
        let (h, _) = forward(x, mapping)?;
        let (_, d2) = nearest_inducing(&h, inducing);
        acc += d2;
    }
    Ok(acc / batch.len() as f64)
}

/// Index and squared distance of the nearest inducing point (lowest index
/// wins ties).
pub(crate) fn nearest_inducing(h: &[f64], inducing: &Matrix) -> (usize, f64) {
    let mut best = 0;
    let mut best_d2 = f64::INFINITY;
    for i in 0..inducing.rows() {
        let d2 = sq_dist(h, inducing.row(i));
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    (best, best_d2)
}

/// The full uncertainty-aware CTR model: feature mapping, kernel, sparse
/// variational state, and the serving cache.
///
/// The cache plus frozen parameters form an immutable snapshot: `&GpModel`
/// is safe to share across reader threads while ranking. Training methods
/// take `&mut self` and rebuild the cache before returning.
#[derive(Debug, Serialize, Deserialize)]
pub struct GpModel {
    pub mapping: MappingParams,
    pub state: VariationalState,
    pub kernel: RbfParams,
    pub mean: MeanFn,
    /// Whether the inducing points have been placed from data (first fit
    /// runs k-means; later refits warm-start).
    pub inducing_initialized: bool,
    #[serde(skip)]
    cache: Option<InferenceCache>,
    #[serde(skip, default)]
    clamp_events: AtomicU64,
}

impl Clone for GpModel {
    fn clone(&self) -> Self {
        GpModel {
            mapping: self.mapping.clone(),
            state: self.state.clone(),
            kernel: self.kernel,
            mean: self.mean,
            inducing_initialized: self.inducing_initialized,
            cache: self.cache.clone(),
            clamp_events: AtomicU64::new(self.clamp_events.load(Ordering::Relaxed)),
        }
    }
}

impl GpModel {
    /// New model with `num_inducing` points placed loosely around the origin
    /// of hidden space (they move to k-means centers on the first fit).
    pub fn new<R: Rng>(
        mapping: MappingParams,
        num_inducing: usize,
        kernel: RbfParams,
        mean: MeanFn,
        rng: &mut R,
    ) -> Result<Self> {
        if num_inducing == 0 {
            return Err(Error::InvalidConfig(
                "at least one inducing point is required".into(),
            ));
        }
        let d = mapping.output_dim();
        let spread = Normal::new(0.0, 0.3).expect("finite sd");
        let inducing = Matrix::new(
            num_inducing,
            d,
            (0..num_inducing * d).map(|_| spread.sample(rng)).collect(),
        );
        let state = VariationalState::init(inducing, &kernel);
        let cache = build_cache(&state, &kernel, &mean)?;
        Ok(GpModel {
            mapping,
            state,
            kernel,
            mean,
            inducing_initialized: false,
            cache: Some(cache),
            clamp_events: AtomicU64::new(0),
        })
    }

    /// Posterior for a full sparse feature (mapping forward + cached GP).
    pub fn posterior(&self, x: &SparseFeature) -> Result<PosteriorGaussian> {
        let (h, _) = forward(x, &self.mapping)?;
        self.posterior_hidden(&h)
    }

    /// Posterior for an already-mapped hidden point.
    pub fn posterior_hidden(&self, h: &[f64]) -> Result<PosteriorGaussian> {
        let cache = self.cache.as_ref().ok_or(Error::StaleCache {
            built: 0,
            current: self.state.version(),
        })?;
        let (post, clamped) = cached_predict_full(h, cache, self.state.version())?;
        if clamped {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
        }
        Ok(post)
    }

    /// Posterior expected CTR for a full sparse feature.
    pub fn predicted_ctr(&self, x: &SparseFeature) -> Result<f64> {
        Ok(self.posterior(x)?.expected_ctr())
    }

    /// Rebuild the serving cache against the current state.
    pub fn rebuild_cache(&mut self) -> Result<()> {
        self.cache = Some(build_cache(&self.state, &self.kernel, &self.mean)?);
        Ok(())
    }

    /// Current serving cache, if one has been built for the live version.
    pub fn cache(&self) -> Option<&InferenceCache> {
        self.cache.as_ref()
    }

    /// How many predictive variances had to be clamped up to zero since
    /// construction (diagnostic; should stay tiny).
    pub fn clamp_event_count(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    pub fn validate(&self) -> Result<()> {
        self.mapping.validate()?;
        self.state.validate()?;
        if self.state.inducing.cols() != self.mapping.output_dim() {
            return Err(Error::ShapeMismatch {
                context: "model",
                expected: format!("inducing dim {}", self.mapping.output_dim()),
                got: format!("{}", self.state.inducing.cols()),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::FieldDef;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "expected {a} ~= {b} within {tol}, diff {}",
            (a - b).abs()
        );
    }

    fn single_point_state(z: &[f64], v: f64, s: f64, kernel: &RbfParams) -> VariationalState {
        let mut st = VariationalState::init(Matrix::new(1, z.len(), z.to_vec()), kernel);
        st.mean[0] = v;
        st.s_log[0] = s.ln();
        st
    }

    #[test]
    fn single_inducing_point_at_query_returns_variational_marginal() {
        let kernel = RbfParams::new(0.7, 1.3);
        let st = single_point_state(&[0.4, -0.2], 0.9, 0.31, &kernel);
        let post = predict(&[0.4, -0.2], &st, &kernel, &MeanFn::Zero).unwrap();
        assert_close(post.mu, 0.9, 1e-12);
        assert_close(post.sigma2, 0.31, 1e-12);
        // Same result under a nonzero constant mean: mu* = m + (v - m).
        let post_c = predict(&[0.4, -0.2], &st, &kernel, &MeanFn::Constant(2.0)).unwrap();
        assert_close(post_c.mu, 0.9, 1e-12);
    }

    #[test]
    fn far_query_reverts_to_the_prior() {
        let kernel = RbfParams::new(0.5, 1.0);
        let st = single_point_state(&[0.0, 0.0], 3.0, 0.01, &kernel);
        for mean in [MeanFn::Zero, MeanFn::Constant(1.5)] {
            let post = predict(&[500.0, 0.0], &st, &kernel, &mean).unwrap();
            assert_close(post.mu, mean.value(), 1e-10);
            assert_close(post.sigma2, 0.25, 1e-10);
        }
    }

    #[test]
    fn cache_single_point_closed_form() {
        let kernel = RbfParams::new(0.8, 1.0);
        let a2 = kernel.amplitude_sq();
        let st = single_point_state(&[1.0], 0.5, 0.2, &kernel);
        let cache = build_cache(&st, &kernel, &MeanFn::Zero).unwrap();
        assert_close(cache.alpha1[0], 0.5 / a2, 1e-12);
        assert_close(cache.alpha2.get(0, 0), (a2 - 0.2) / (a2 * a2), 1e-12);
    }

    #[test]
    fn cache_alpha2_vanishes_when_s_equals_prior() {
        let kernel = RbfParams::new(0.8, 1.0);
        let st = single_point_state(&[1.0], 0.0, kernel.amplitude_sq(), &kernel);
        let cache = build_cache(&st, &kernel, &MeanFn::Zero).unwrap();
        assert!(cache.alpha2.get(0, 0).abs() < 1e-12);
        // With alpha2 = 0 the predictive variance is the prior everywhere.
        let post = cached_predict(&[0.3], &cache, st.version()).unwrap();
        assert_close(post.sigma2, kernel.amplitude_sq(), 1e-10);
    }

    #[test]
    fn cached_predict_matches_exact_predict() {
        let kernel = RbfParams::new(0.9, 0.8);
        let mean = MeanFn::Constant(0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for m in [1usize, 2, 4, 8] {
            let mut st = VariationalState::init(
                Matrix::new(
                    m,
                    2,
                    (0..m * 2).map(|_| rng.random_range(-2.0..2.0)).collect(),
                ),
                &kernel,
            );
            for i in 0..m {
                st.mean[i] = rng.random_range(-1.0..1.0);
                st.s_log[i] = rng.random_range(-2.0..0.5);
            }
            let cache = build_cache(&st, &kernel, &mean).unwrap();
            for _ in 0..25 {
                let h: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
                let exact = predict(&h, &st, &kernel, &mean).unwrap();
                let fast = cached_predict(&h, &cache, st.version()).unwrap();
                assert_close(fast.mu, exact.mu, 1e-10);
                assert_close(fast.sigma2, exact.sigma2, 1e-10);
            }
        }
    }

    #[test]
    fn cache_alpha2_is_symmetric() {
        let kernel = RbfParams::new(1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut st = VariationalState::init(
            Matrix::new(6, 2, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()),
            &kernel,
        );
        for i in 0..6 {
            st.mean[i] = rng.random_range(-1.0..1.0);
            st.s_log[i] = rng.random_range(-2.0..0.0);
        }
        let cache = build_cache(&st, &kernel, &MeanFn::Zero).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((cache.alpha2.get(i, j) - cache.alpha2.get(j, i)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let kernel = RbfParams::new(1.0, 1.0);
        let mut st = single_point_state(&[0.0], 0.1, 0.5, &kernel);
        let cache = build_cache(&st, &kernel, &MeanFn::Zero).unwrap();
        assert!(cached_predict(&[0.0], &cache, st.version()).is_ok());
        st.mean[0] = 0.7;
        st.bump_version();
        assert!(matches!(
            cached_predict(&[0.0], &cache, st.version()),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn kl_is_zero_when_q_equals_p() {
        // Single inducing point: q = p iff v = m(Z) and S = a^2.
        let kernel = RbfParams::new(0.6, 1.1);
        for mean in [MeanFn::Zero, MeanFn::Constant(-0.8)] {
            let st = single_point_state(&[0.7], mean.value(), kernel.amplitude_sq(), &kernel);
            let kl = kl_q_p(&st, &kernel, &mean).unwrap();
            assert!(kl.abs() <= 1e-10, "kl = {kl}");
        }
    }

    #[test]
    fn kl_single_point_closed_form() {
        let kernel = RbfParams::new(0.9, 1.0);
        let a2 = kernel.amplitude_sq();
        let (v, s) = (0.4, 0.2);
        let st = single_point_state(&[0.0], v, s, &kernel);
        let want = 0.5 * (s / a2 + v * v / a2 - 1.0 + (a2 / s).ln());
        assert_close(kl_q_p(&st, &kernel, &MeanFn::Zero).unwrap(), want, 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_on_random_states() {
        let kernel = RbfParams::new(1.0, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let m = rng.random_range(1..6);
            let mut st = VariationalState::init(
                Matrix::new(
                    m,
                    2,
                    (0..m * 2).map(|_| rng.random_range(-2.0..2.0)).collect(),
                ),
                &kernel,
            );
            for i in 0..m {
                st.mean[i] = rng.random_range(-2.0..2.0);
                st.s_log[i] = rng.random_range(-3.0..1.0);
            }
            let kl = kl_q_p(&st, &kernel, &MeanFn::Zero).unwrap();
            assert!(kl >= -1e-10, "kl = {kl}");
        }
    }

    #[test]
    fn degenerate_expected_log_lik_is_exact() {
        let post = PosteriorGaussian { mu: 1.7, sigma2: 0.0 };
        assert_eq!(expected_log_lik(1, &post), log_sigmoid(1.7));
        assert_eq!(expected_log_lik(0, &post), log_sigmoid(-1.7));
        let zero = PosteriorGaussian { mu: 0.0, sigma2: 0.0 };
        assert_close(expected_log_lik(1, &zero), 0.5_f64.ln(), 1e-15);
    }

    #[test]
    fn expected_log_lik_is_nonpositive_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mu = rng.random_range(-4.0..4.0);
            let s2 = rng.random_range(0.0..5.0);
            let e1 = expected_log_lik(1, &PosteriorGaussian { mu, sigma2: s2 });
            let e0 = expected_log_lik(0, &PosteriorGaussian { mu: -mu, sigma2: s2 });
            assert!(e1 <= 0.0);
            assert_close(e1, e0, 1e-13);
        }
    }

    #[test]
    fn uncertainty_hurts_a_correct_mean() {
        let at = |s2: f64| expected_log_lik(1, &PosteriorGaussian { mu: 1.0, sigma2: s2 });
        assert!(at(0.0) > at(1.0));
        assert!(at(1.0) > at(4.0));
    }

    #[test]
    fn quadrature_is_converged_at_twenty_nodes() {
        for &mu in &[-3.0, 0.0, 3.0] {
            for &s2 in &[0.01, 1.0, 9.0] {
                let post = PosteriorGaussian { mu, sigma2: s2 };
                for y in [0u8, 1] {
                    let g20 = expected_log_lik_with_nodes(y, &post, 20);
                    let g40 = expected_log_lik_with_nodes(y, &post, 40);
                    assert!(
                        (g20 - g40).abs() <= 1e-6,
                        "mu={mu} s2={s2} y={y}: {g20} vs {g40}"
                    );
                    assert_close(expected_log_lik(y, &post), g20, 1e-15);
                }
            }
        }
    }

    #[test]
    fn expected_log_lik_gradients_match_finite_differences() {
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let mu = rng.random_range(-3.0..3.0);
            let s2 = rng.random_range(0.05..4.0);
            for y in [0u8, 1] {
                let (_, d_mu, d_s2) = expected_log_lik_grads(y, mu, s2);
                let f = |m: f64, s: f64| expected_log_lik_grads(y, m, s).0;
                let fd_mu = (f(mu + h, s2) - f(mu - h, s2)) / (2.0 * h);
                let fd_s2 = (f(mu, s2 + h) - f(mu, s2 - h)) / (2.0 * h);
                assert!((d_mu - fd_mu).abs() <= 1e-6 * d_mu.abs().max(1.0));
                assert!((d_s2 - fd_s2).abs() <= 1e-6 * d_s2.abs().max(1.0));
            }
        }
    }

    #[test]
    fn clustering_reg_hand_cases() {
        let mapping = MappingParams {
            fields: vec![FieldDef { id: 0, vocab: 2 }],
            embed_dim: 2,
            embeddings: vec![Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]])],
            layers: vec![],
        };
        let inducing = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0]]);
        // Point (1, 0): nearest is (0,0) at squared distance 1.
        let batch = vec![(SparseFeature::one_hot(0, 0), 1u8)];
        assert_close(clustering_reg(&batch, &mapping, &inducing).unwrap(), 1.0, 1e-15);
        // Coincident point: zero.
        let batch0 = vec![(SparseFeature::one_hot(0, 1), 0u8)];
        let coincident = Matrix::from_rows(&[vec![0.0, 0.0]]);
        assert_close(
            clustering_reg(&batch0, &mapping, &coincident).unwrap(),
            0.0,
            1e-15
        );
    }

    #[test]
    fn clustering_tie_breaks_to_lowest_index_without_changing_value() {
        let inducing = Matrix::from_rows(&[vec![0.0], vec![2.0]]);
        let (idx, d2) = nearest_inducing(&[1.0], &inducing);
        assert_eq!(idx, 0);
        assert_close(d2, 1.0, 1e-15);
    }

    #[test]
    fn expected_ctr_behaves() {
        let sharp = PosteriorGaussian { mu: 2.0, sigma2: 0.0 };
        assert_eq!(sharp.expected_ctr(), sigmoid(2.0));
        let centered = PosteriorGaussian { mu: 0.0, sigma2: 3.0 };
        assert_close(centered.expected_ctr(), 0.5, 1e-12);
        // Uncertainty pulls an extreme mean toward the middle.
        let confident = PosteriorGaussian { mu: 3.0, sigma2: 0.0 }.expected_ctr();
        let uncertain = PosteriorGaussian { mu: 3.0, sigma2: 4.0 }.expected_ctr();
        assert!(uncertain < confident);
        assert!(uncertain > 0.5);
    }

    #[test]
    fn model_snapshot_serves_posteriors_and_counts_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let fields = [FieldDef { id: 0, vocab: 4 }];
        let mapping = MappingParams::init(&fields, 3, &[6], 2, &mut rng);
        let model = GpModel::new(
            mapping,
            4,
            RbfParams::new(0.5, 1.0),
            MeanFn::Zero,
            &mut rng,
        )
        .unwrap();
        model.validate().unwrap();
        let post = model.posterior(&SparseFeature::one_hot(0, 2)).unwrap();
        assert!(post.sigma2 >= 0.0 && post.sigma2 <= model.kernel.amplitude_sq() + 1e-9);
        assert_eq!(model.clamp_event_count(), 0);
    }
}
