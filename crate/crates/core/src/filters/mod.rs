//! Measurement-update filters.
//!
//! Every filter consumes a [`LikelihoodContext`] (observation function, measured values and
//! noise model) and, except for least squares, a Gaussian [`PredictedBelief`].

mod bcf;
mod kalman;
mod lsq;
mod particle;

pub use bcf::{bcf_condense, bcf_initialize, bcf_iterate, condense_step, BcfOptions, CondenseStats};
pub use kalman::{ekf_update, kalman_update_linear, ukf_update};
pub use lsq::{lsq_estimate, LsqOptions};
pub use particle::{pf_map, pf_mmse, pf_propagate, pf_resample, pf_update, ParticleEnsemble};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::noise::NoiseModel;
use crate::quadrature::{cholesky_lower, QuadratureError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("normal equations are singular")]
    SingularNormalEquations,
    #[error("every particle has zero likelihood")]
    AllWeightsZero,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Observation function `h: R^d → R^k`.
pub trait MeasurementModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn measurement_dim(&self) -> usize;
    fn evaluate(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Central finite-difference Jacobian with step `1e-6`.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let h = 1e-6;
        let mut jac = DMatrix::zeros(self.measurement_dim(), self.state_dim());
        let mut xp = x.clone();
        for l in 0..self.state_dim() {
            xp[l] = x[l] + h;
            let fp = self.evaluate(&xp);
            xp[l] = x[l] - h;
            let fm = self.evaluate(&xp);
            xp[l] = x[l];
            jac.set_column(l, &((fp - fm) / (2.0 * h)));
        }
        jac
    }
}

/// `h(x) = H x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub matrix: DMatrix<f64>,
}

impl MeasurementModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn measurement_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn evaluate(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// Each state coordinate observed `repeats` times through the same scalar map; output
/// index `k·repeats + r` holds `f(x_k)`.
#[derive(Debug, Clone, Copy)]
pub struct CoordinatewiseModel {
    pub dim: usize,
    pub repeats: usize,
    pub map: fn(f64) -> f64,
}

impl MeasurementModel for CoordinatewiseModel {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn measurement_dim(&self) -> usize {
        self.dim * self.repeats
    }

    fn evaluate(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim * self.repeats,
            (0..self.dim).flat_map(|k| std::iter::repeat_n((self.map)(x[k]), self.repeats)),
        )
    }
}

/// Observation function, measured values and noise model for one update.
#[derive(Clone, Copy)]
pub struct LikelihoodContext<'a> {
    model: &'a dyn MeasurementModel,
    y: &'a DVector<f64>,
    noise: &'a NoiseModel,
}

impl std::fmt::Debug for LikelihoodContext<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LikelihoodContext")
            .field("state_dim", &self.model.state_dim())
            .field("y", &self.y)
            .field("noise", &self.noise)
            .finish()
    }
}

impl<'a> LikelihoodContext<'a> {
    pub fn new(
        model: &'a dyn MeasurementModel,
        y: &'a DVector<f64>,
        noise: &'a NoiseModel,
    ) -> Result<Self, FilterError> {
        let k = model.measurement_dim();
        for got in [y.len(), noise.len()] {
            if got != k {
                return Err(FilterError::DimensionMismatch { expected: k, got });
            }
        }
        Ok(Self { model, y, noise })
    }

    pub fn model(&self) -> &'a dyn MeasurementModel {
        self.model
    }

    pub fn measurements(&self) -> &'a DVector<f64> {
        self.y
    }

    pub fn noise(&self) -> &'a NoiseModel {
        self.noise
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    /// Gaussian-equivalent measurement covariance (diagonal).
    pub fn noise_cov(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.noise.variances())
    }
}

/// `log f(y | x)`; `-inf` when a bounded-support channel excludes the residual.
pub fn log_likelihood(ctx: &LikelihoodContext<'_>, x: &DVector<f64>) -> f64 {
    let h = ctx.model.evaluate(x);
    ctx.noise
        .channels()
        .iter()
        .zip(ctx.y.iter().zip(h.iter()))
        .map(|(c, (y, hx))| c.log_density(y - hx))
        .sum()
}

/// Gaussian prediction `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PredictedBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, FilterError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(FilterError::DimensionMismatch {
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        cholesky_lower(&cov).map_err(|_| FilterError::NotPositiveDefinite)?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        gaussian_log_density(
            x,
            &self.mean,
            &cholesky_lower(&self.cov).expect("validated on construction"),
        )
    }
}

/// `log N(x; mean, LLᵀ)` given the lower Cholesky factor `L`.
pub(crate) fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, chol: &DMatrix<f64>) -> f64 {
    let diff = x - mean;
    let z = chol
        .solve_lower_triangular(&diff)
        .expect("cholesky factor has a non-zero diagonal");
    let log_det: f64 = chol.diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * z.norm_squared() - log_det - 0.5 * LN_2PI * x.len() as f64
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub effective_sample_size: Option<f64>,
    /// Objective, KL proxy or similar per-iteration trace.
    pub trace: Vec<f64>,
    /// Components whose quadrature ratios all vanished and were floored.
    pub degenerate_components: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub estimate: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

/// Mixture of Gaussians with positive weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self, FilterError> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(FilterError::InvalidArgument(
                "mixture needs matching, non-empty parts".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(FilterError::InvalidArgument("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { weights, means, covs })
    }

    pub fn single(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![mean],
            covs: vec![cov],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `Σ α_i μ_i`.
    pub fn mean(&self) -> DVector<f64> {
        self.weights
            .iter()
            .zip(&self.means)
            .fold(DVector::zeros(self.dim()), |acc, (w, m)| acc + m * *w)
    }

    /// Total covariance `Σ α_i (Σ_i + μ_i μ_iᵀ) − μ μᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let mut c = DMatrix::zeros(self.dim(), self.dim());
        for ((w, m), s) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let d = m - &mu;
            c += (s + &d * d.transpose()) * *w;
        }
        symmetrize(&c)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64, FilterError> {
        let chols = self.covs.iter().map(cholesky_lower).collect::<Result<Vec<_>, _>>()?;
        Ok(self.log_density_with(x, &chols))
    }

    pub(crate) fn log_density_with(&self, x: &DVector<f64>, chols: &[DMatrix<f64>]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(chols)
            .map(|((w, m), l)| w.ln() + gaussian_log_density(x, m, l))
            .collect();
        log_sum_exp(&terms)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::ieee14;
    use crate::noise::ChannelNoiseSpec;
    use crate::powerflow::{GridObservation, MeasurementPlan, StateVector};
    use proptest::prelude::*;

    #[test]
    fn zero_residual_gaussian_loglik() {
        let model = LinearModel {
            matrix: DMatrix::identity(3, 3),
        };
        let x = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let y = model.evaluate(&x);
        let sig = [0.1, 0.2, 0.05];
        let nm = NoiseModel::new(sig.iter().map(|&s| ChannelNoiseSpec::gaussian(s).unwrap()).collect(), 0);
        let ctx = LikelihoodContext::new(&model, &y, &nm).unwrap();
        let expect: f64 = sig
            .iter()
            .map(|s| -(s * (2.0 * std::f64::consts::PI).sqrt()).ln())
            .sum();
        assert!((log_likelihood(&ctx, &x) - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_channel_outside_support() {
        let model = LinearModel {
            matrix: DMatrix::identity(1, 1),
        };
        let y = DVector::from_vec(vec![1.0]);
        let nm = NoiseModel::iid(1, ChannelNoiseSpec::new(0.1, 0.2, 0.0).unwrap(), 0);
        let ctx = LikelihoodContext::new(&model, &y, &nm).unwrap();
        assert_eq!(log_likelihood(&ctx, &DVector::from_vec(vec![0.5])), f64::NEG_INFINITY);
    }

    #[test]
    fn context_checks_lengths() {
        let model = LinearModel {
            matrix: DMatrix::identity(2, 2),
        };
        let y = DVector::zeros(3);
        let nm = NoiseModel::iid(2, ChannelNoiseSpec::gaussian(1.0).unwrap(), 0);
        assert!(LikelihoodContext::new(&model, &y, &nm).is_err());
    }

    #[test]
    fn mixture_moments() {
        let gm = GaussianMixture::new(
            vec![1.0, 3.0],
            vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])],
            vec![DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 0.5)],
        )
        .unwrap();
        assert_eq!(gm.weights(), &[0.25, 0.75]);
        assert!((gm.mean()[0] - 0.5).abs() < 1e-15);
        assert!((gm.covariance()[(0, 0)] - (0.5 + 1.0 - 0.25)).abs() < 1e-15);
        assert!(GaussianMixture::new(vec![0.0], vec![DVector::zeros(1)], vec![DMatrix::identity(1, 1)]).is_err());
    }

    #[test]
    fn belief_rejects_indefinite_cov() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(
            PredictedBelief::new(DVector::zeros(2), cov),
            Err(FilterError::NotPositiveDefinite)
        );
    }

    fn arb_state() -> impl Strategy<Value = StateVector> {
        (
            prop::collection::vec(0.9f64..1.1, 13),
            prop::collection::vec(-0.3f64..0.3, 13),
        )
            .prop_map(|(vm, va)| StateVector::from_parts(&vm, &va))
    }

    proptest! {
        #[test]
        fn loglik_matches_channelwise_oracle(x in arb_state(), y in arb_state(), p in 0.0f64..=1.0) {
            let m = ieee14();
            let plan = MeasurementPlan::voltages_and_injections(&m);
            let obs = GridObservation::new(&m, &plan).unwrap();
            let nm = NoiseModel::for_plan(&plan, 0.02, 0.001, p, 5.0, 0).unwrap();
            let yv = obs.evaluate(y.as_vector());
            let ctx = LikelihoodContext::new(&obs, &yv, &nm).unwrap();
            let h = obs.evaluate(x.as_vector());
            let mut oracle = 0.0;
            for k in 0..plan.len() {
                oracle += crate::noise::noise_log_density(&nm, k, yv[k] - h[k]);
            }
            let got = log_likelihood(&ctx, x.as_vector());
            if oracle.is_finite() {
                prop_assert!((got - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
            } else {
                prop_assert_eq!(got, oracle);
            }
        }
    }
}
