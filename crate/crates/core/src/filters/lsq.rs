//! Weighted least squares by Gauss–Newton with step halving.

use nalgebra::{DMatrix, DVector};

use super::{Diagnostics, FilterError, LikelihoodContext, PosteriorSummary};

#[derive(Debug, Clone, PartialEq)]
pub struct LsqOptions {
    /// Per-channel weights; `None` uses inverse Gaussian-equivalent noise variances.
    pub weights: Option<DVector<f64>>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LsqOptions {
    fn default() -> Self {
        Self {
            weights: None,
            tol: 1e-10,
            max_iter: 20,
        }
    }
}

fn objective(r: &DVector<f64>, w: &DVector<f64>) -> f64 {
    r.iter().zip(w.iter()).map(|(r, w)| w * r * r).sum()
}

/// Minimises `Σ w_k (y_k − h_k(x))²` from `x0`, ignoring any prior.
///
/// A step is accepted only if it lowers the objective (the step is halved up to 30 times),
/// so the objective trace in the diagnostics is non-increasing. Iteration stops when the
/// accepted step norm drops below `tol`; on exhaustion the last iterate is returned with
/// `converged = false`.
pub fn lsq_estimate(
    ctx: &LikelihoodContext<'_>,
    x0: &DVector<f64>,
    opts: &LsqOptions,
) -> Result<PosteriorSummary, FilterError> {
    if opts.max_iter == 0 {
        return Err(FilterError::InvalidArgument("max_iter must be at least 1".into()));
    }
    let model = ctx.model();
    let y = ctx.measurements();
    let w = match &opts.weights {
        Some(w) => w.clone(),
        None => ctx.noise().variances().map(|v| 1.0 / v),
    };
    if w.len() != y.len() {
        return Err(FilterError::DimensionMismatch {
            expected: y.len(),
            got: w.len(),
        });
    }
    let mut x = x0.clone();
    let mut r = y - model.evaluate(&x);
    let mut obj = objective(&r, &w);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let mut normal = DMatrix::zeros(x.len(), x.len());
    while iterations < opts.max_iter {
        iterations += 1;
        let j = model.jacobian(&x);
        let jw = DMatrix::from_fn(j.nrows(), j.ncols(), |k, l| j[(k, l)] * w[k]);
        normal = jw.transpose() * &j;
        let rhs = jw.transpose() * &r;
        let chol = normal.clone().cholesky().ok_or(FilterError::SingularNormalEquations)?;
        let step = chol.solve(&rhs);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &x + &step * scale;
            let rc = y - model.evaluate(&cand);
            let oc = objective(&rc, &w);
            if oc <= obj {
                x = cand;
                r = rc;
                obj = oc;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        trace.push(obj);
        if !accepted || step.norm() * scale < opts.tol {
            converged = true;
            break;
        }
    }
    let covariance = normal.try_inverse().ok_or(FilterError::SingularNormalEquations)?;
    Ok(PosteriorSummary {
        estimate: x,
        covariance,
        diagnostics: Diagnostics {
            iterations,
            converged,
            trace,
            ..Diagnostics::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{LinearModel, MeasurementModel};
    use crate::netmodel::ieee14;
    use crate::noise::{sample_noise, ChannelNoiseSpec, NoiseModel};
    use crate::powerflow::{solve_power_flow, GridObservation, LoadTable, MeasurementPlan, StateVector};

    #[test]
    fn linear_plan_recovered_in_one_step() {
        let model = LinearModel {
            matrix: DMatrix::identity(4, 4),
        };
        let truth = DVector::from_vec(vec![1.0, 0.98, 1.02, 1.01]);
        let y = model.evaluate(&truth);
        let nm = NoiseModel::iid(4, ChannelNoiseSpec::gaussian(0.001).unwrap(), 0);
        let ctx = LikelihoodContext::new(&model, &y, &nm).unwrap();
        let out = lsq_estimate(
            &ctx,
            &DVector::from_element(4, 1.0),
            &LsqOptions {
                max_iter: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((out.estimate - truth).amax() < 1e-12);
    }

    fn grid() -> (GridObservation, StateVector, MeasurementPlan) {
        let m = ieee14();
        let plan = MeasurementPlan::voltages_and_injections(&m);
        let truth = solve_power_flow(&m, &LoadTable::nominal(&m), 1e-12, 20).unwrap();
        (GridObservation::new(&m, &plan).unwrap(), truth, plan)
    }

    #[test]
    fn noiseless_grid_recovered_from_flat_start() {
        let (obs, truth, plan) = grid();
        let y = obs.evaluate(truth.as_vector());
        let nm = NoiseModel::for_plan(&plan, 0.02, 0.001, 1.0, 5.0, 0).unwrap();
        let ctx = LikelihoodContext::new(&obs, &y, &nm).unwrap();
        let flat = StateVector::flat(&ieee14());
        let out = lsq_estimate(&ctx, flat.as_vector(), &LsqOptions::default()).unwrap();
        assert!((out.estimate - truth.as_vector()).amax() < 1e-6);
    }

    #[test]
    fn noisy_objective_is_monotone() {
        let (obs, truth, plan) = grid();
        let nm = NoiseModel::for_plan(&plan, 0.02, 0.001, 1.0, 5.0, 7).unwrap();
        let y = obs.evaluate(truth.as_vector()) + sample_noise(&nm, 0);
        let ctx = LikelihoodContext::new(&obs, &y, &nm).unwrap();
        let flat = StateVector::flat(&ieee14());
        let out = lsq_estimate(&ctx, flat.as_vector(), &LsqOptions::default()).unwrap();
        assert!(out.diagnostics.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.diagnostics.trace.len() >= 2);
    }

    #[test]
    fn rank_deficient_plan_is_singular() {
        let model = LinearModel {
            matrix: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        };
        let y = DVector::from_vec(vec![1.0]);
        let nm = NoiseModel::iid(1, ChannelNoiseSpec::gaussian(0.1).unwrap(), 0);
        let ctx = LikelihoodContext::new(&model, &y, &nm).unwrap();
        assert_eq!(
            lsq_estimate(&ctx, &DVector::zeros(2), &LsqOptions::default()),
            Err(FilterError::SingularNormalEquations)
        );
        assert!(lsq_estimate(
            &ctx,
            &DVector::zeros(2),
            &LsqOptions {
                max_iter: 0,
                ..Default::default()
            }
        )
        .is_err());
    }
}
