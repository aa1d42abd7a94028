//! Belief condensation: fit a Gaussian mixture `g` to a target density `f` by the
//! KL-decreasing fixed-point recursions
//!
//! ```text
//! α_i ← α_i · E_{g_i}[f/g]
//! μ_i ← E_{g_i}[(f/g) x] / E_{g_i}[f/g]
//! Σ_i ← E_{g_i}[(f/g) x xᵀ] / E_{g_i}[f/g] − μ_i μ_iᵀ
//! ```
//!
//! with every expectation under the current component evaluated by a quadrature rule. The
//! target only needs to be known up to a constant, since it cancels in each ratio.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::{
    gaussian_log_density, log_likelihood, log_sum_exp, symmetrize, Diagnostics, FilterError, GaussianMixture,
    LikelihoodContext, PosteriorSummary, PredictedBelief,
};
use crate::quadrature::{cholesky_lower, transformed_nodes, QuadratureRule};
use crate::rng;

const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BcfOptions {
    pub components: usize,
    pub iterations: usize,
    /// Keep only the diagonal of each component covariance.
    pub diagonal: bool,
    pub seed: u64,
}

impl Default for BcfOptions {
    fn default() -> Self {
        Self {
            components: 1,
            iterations: 1,
            diagonal: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CondenseStats {
    /// Components whose ratios vanished at every node; they keep their parameters and
    /// have their weight floored.
    pub degenerate: usize,
}

/// Equal weights; means drawn from the predicted belief; covariances `P · m^(−2/d)`.
/// With `m = 1` the single component is the belief itself.
pub fn bcf_initialize(belief: &PredictedBelief, m: usize, seed: u64) -> Result<GaussianMixture, FilterError> {
    if m == 0 {
        return Err(FilterError::InvalidArgument(
            "mixture needs at least one component".into(),
        ));
    }
    if m == 1 {
        return Ok(GaussianMixture::single(belief.mean.clone(), belief.cov.clone()));
    }
    let d = belief.dim();
    let l = cholesky_lower(&belief.cov).map_err(|_| FilterError::NotPositiveDefinite)?;
    let shrink = (m as f64).powf(-2.0 / d as f64);
    let mut r = rng::stream(seed, &[rng::tag("bcf-init")]);
    let means = (0..m)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut r));
            &belief.mean + &l * z
        })
        .collect();
    GaussianMixture::new(vec![1.0; m], means, vec![&belief.cov * shrink; m])
}

/// Symmetric positive definite repair with escalating diagonal jitter. A matrix that cannot
/// be repaired within twelve decades of jitter is replaced by `fallback_scale · I`.
fn repair_cov(c: &DMatrix<f64>, fallback_scale: f64) -> DMatrix<f64> {
    let d = c.nrows();
    let fallback = || DMatrix::identity(d, d) * fallback_scale;
    if c.iter().any(|v| !v.is_finite()) {
        return fallback();
    }
    let c = symmetrize(c);
    if c.clone().cholesky().is_some() {
        return c;
    }
    let mut scale = c.trace() / d as f64;
    if !(scale > 0.0) {
        scale = fallback_scale;
    }
    let mut jitter = 1e-12 * scale;
    for _ in 0..=12 {
        let mut m = c.clone();
        for i in 0..d {
            m[(i, i)] += jitter;
        }
        if m.clone().cholesky().is_some() {
            return m;
        }
        jitter *= 10.0;
    }
    fallback()
}

/// One pass of the condensation recursions towards `exp(log_target)`.
pub fn condense_step<F>(
    gm: &GaussianMixture,
    log_target: F,
    rule: &QuadratureRule,
    diagonal: bool,
) -> Result<(GaussianMixture, CondenseStats), FilterError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let chols = gm.covs().iter().map(cholesky_lower).collect::<Result<Vec<_>, _>>()?;
    let mut stats = CondenseStats::default();
    let mut log_weights = Vec::with_capacity(gm.len());
    let mut means = Vec::with_capacity(gm.len());
    let mut covs = Vec::with_capacity(gm.len());

    for i in 0..gm.len() {
        let nodes = transformed_nodes(rule, &gm.means()[i], &gm.covs()[i])?;
        let log_ratio: Vec<f64> = nodes
            .column_iter()
            .map(|col| {
                let x = col.into_owned();
                let lf = log_target(&x);
                if lf == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                lf - gm.log_density_with(&x, &chols)
            })
            .collect();
        let shift = log_ratio
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        let old_scale = gm.covs()[i].trace() / gm.dim() as f64;
        if shift == f64::NEG_INFINITY {
            stats.degenerate += 1;
            log_weights.push(f64::NEG_INFINITY);
            means.push(gm.means()[i].clone());
            covs.push(gm.covs()[i].clone());
            continue;
        }
        let s: Vec<f64> = log_ratio
            .iter()
            .zip(rule.weights())
            .map(|(lr, w)| w * (lr - shift).exp())
            .collect();
        let total: f64 = s.iter().sum();
        log_weights.push(gm.weights()[i].ln() + shift + total.ln());
        let mu = nodes
            .column_iter()
            .zip(&s)
            .fold(DVector::zeros(gm.dim()), |acc, (x, w)| acc + x * *w)
            / total;
        let mut cov = DMatrix::zeros(gm.dim(), gm.dim());
        for (x, w) in nodes.column_iter().zip(&s) {
            let dx = x - &mu;
            cov += &dx * dx.transpose() * (*w / total);
        }
        if diagonal {
            cov = DMatrix::from_diagonal(&cov.diagonal());
        }
        means.push(mu);
        covs.push(repair_cov(&cov, old_scale));
    }

    let norm = log_sum_exp(&log_weights);
    if !norm.is_finite() {
        return Err(FilterError::InvalidArgument(
            "target vanishes at every quadrature node".into(),
        ));
    }
    let weights = log_weights
        .iter()
        .map(|lw| (lw - norm).exp().max(WEIGHT_FLOOR))
        .collect();
    Ok((GaussianMixture::new(weights, means, covs)?, stats))
}

/// One condensation pass towards the posterior `f(y|x) · N(x; x⁻, P⁻)`.
pub fn bcf_iterate(
    gm: &GaussianMixture,
    belief: &PredictedBelief,
    ctx: &LikelihoodContext<'_>,
    rule: &QuadratureRule,
    diagonal: bool,
) -> Result<(GaussianMixture, CondenseStats), FilterError> {
    let prior_chol = cholesky_lower(&belief.cov).map_err(|_| FilterError::NotPositiveDefinite)?;
    condense_step(
        gm,
        |x| log_likelihood(ctx, x) + gaussian_log_density(x, &belief.mean, &prior_chol),
        rule,
        diagonal,
    )
}

/// Initialise then run `opts.iterations` passes; the point estimate is the mixture mean.
pub fn bcf_condense(
    belief: &PredictedBelief,
    ctx: &LikelihoodContext<'_>,
    opts: &BcfOptions,
    rule: &QuadratureRule,
) -> Result<(GaussianMixture, PosteriorSummary), FilterError> {
    if opts.iterations == 0 {
        return Err(FilterError::InvalidArgument(
            "at least one iteration is required".into(),
        ));
    }
    if belief.dim() != ctx.state_dim() {
        return Err(FilterError::DimensionMismatch {
            expected: ctx.state_dim(),
            got: belief.dim(),
        });
    }
    let mut gm = bcf_initialize(belief, opts.components, opts.seed)?;
    let mut degenerate = 0;
    for _ in 0..opts.iterations {
        let (next, stats) = bcf_iterate(&gm, belief, ctx, rule, opts.diagonal)?;
        degenerate += stats.degenerate;
        gm = next;
    }
    let summary = PosteriorSummary {
        estimate: gm.mean(),
        covariance: gm.covariance(),
        diagnostics: Diagnostics {
            iterations: opts.iterations,
            converged: true,
            degenerate_components: degenerate,
            ..Diagnostics::default()
        },
    };
    Ok((gm, summary))
}
