//! Kalman-type updates: first-order linearisation and the scaled unscented transform.

use nalgebra::{DMatrix, DVector};

use super::{symmetrize, Diagnostics, FilterError, LikelihoodContext, PosteriorSummary, PredictedBelief};
use crate::quadrature::cholesky_lower;

/// Shared gain step given innovation covariance `s` and state/measurement cross covariance.
fn gain_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    s: &DMatrix<f64>,
    innovation: &DVector<f64>,
) -> Result<PosteriorSummary, FilterError> {
    let chol = symmetrize(s).cholesky().ok_or(FilterError::NotPositiveDefinite)?;
    // K = C S⁻¹  ⇔  S Kᵀ = Cᵀ
    let k = chol.solve(&cross.transpose()).transpose();
    let estimate = mean + &k * innovation;
    let covariance = symmetrize(&(cov - &k * s * k.transpose()));
    Ok(PosteriorSummary {
        estimate,
        covariance,
        diagnostics: Diagnostics {
            iterations: 1,
            converged: true,
            ..Diagnostics::default()
        },
    })
}

/// Closed-form update for `y = H x + n`, `n ~ N(0, R)`.
pub fn kalman_update_linear(
    belief: &PredictedBelief,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<PosteriorSummary, FilterError> {
    let cross = &belief.cov * h.transpose();
    let s = h * &cross + r;
    gain_update(&belief.mean, &belief.cov, &cross, &s, &(y - h * &belief.mean))
}

/// Extended Kalman update linearised at the prior mean with the model's Jacobian.
pub fn ekf_update(belief: &PredictedBelief, ctx: &LikelihoodContext<'_>) -> Result<PosteriorSummary, FilterError> {
    check_dim(belief, ctx)?;
    let model = ctx.model();
    let h = model.jacobian(&belief.mean);
    let cross = &belief.cov * h.transpose();
    let s = &h * &cross + ctx.noise_cov();
    let innovation = ctx.measurements() - model.evaluate(&belief.mean);
    gain_update(&belief.mean, &belief.cov, &cross, &s, &innovation)
}

/// Unscented update with `α = 1`, `β = 2`, `κ = 3 − d`.
///
/// The measurement noise covariance is the Gaussian-equivalent variance of each channel.
pub fn ukf_update(belief: &PredictedBelief, ctx: &LikelihoodContext<'_>) -> Result<PosteriorSummary, FilterError> {
    check_dim(belief, ctx)?;
    let d = belief.dim();
    let df = d as f64;
    let (alpha, beta, kappa) = (1.0, 2.0, 3.0 - df);
    let lambda = alpha * alpha * (df + kappa) - df;
    let spread = (df + lambda).sqrt();
    let l = cholesky_lower(&belief.cov).map_err(|_| FilterError::NotPositiveDefinite)?;

    let mut points = Vec::with_capacity(2 * d + 1);
    points.push(belief.mean.clone());
    for k in 0..d {
        points.push(&belief.mean + l.column(k) * spread);
    }
    for k in 0..d {
        points.push(&belief.mean - l.column(k) * spread);
    }
    let wm0 = lambda / (df + lambda);
    let wc0 = wm0 + (1.0 - alpha * alpha + beta);
    let wi = 1.0 / (2.0 * (df + lambda));
    let mean_weight = |i: usize| if i == 0 { wm0 } else { wi };
    let cov_weight = |i: usize| if i == 0 { wc0 } else { wi };

    let model = ctx.model();
    let ys: Vec<DVector<f64>> = points.iter().map(|p| model.evaluate(p)).collect();
    let y_mean = ys
        .iter()
        .enumerate()
        .fold(DVector::zeros(model.measurement_dim()), |acc, (i, y)| {
            acc + y * mean_weight(i)
        });
    let mut s = ctx.noise_cov();
    let mut cross = DMatrix::zeros(d, model.measurement_dim());
    for (i, (p, y)) in points.iter().zip(&ys).enumerate() {
        let dy = y - &y_mean;
        let dx = p - &belief.mean;
        s += &dy * dy.transpose() * cov_weight(i);
        cross += dx * dy.transpose() * cov_weight(i);
    }
    gain_update(&belief.mean, &belief.cov, &cross, &s, &(ctx.measurements() - y_mean))
}

fn check_dim(belief: &PredictedBelief, ctx: &LikelihoodContext<'_>) -> Result<(), FilterError> {
    if belief.dim() != ctx.state_dim() {
        return Err(FilterError::DimensionMismatch {
            expected: ctx.state_dim(),
            got: belief.dim(),
        });
    }
    Ok(())
}
