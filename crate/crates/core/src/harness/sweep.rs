//! Update-only Monte-Carlo sweeps around a fixed operating point.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{
    load_network, noise_for_plan, plan_for_trial, update_from_prior, BcfSettings, Cell, ExperimentConfig, FilterSpec,
    HarnessError, MseReport, Table,
};
use crate::filters::{LikelihoodContext, MeasurementModel, PredictedBelief};
use crate::netmodel::NetworkModel;
use crate::powerflow::{solve_power_flow, GridObservation, LoadTable, StateVector};
use crate::quadrature::QuadratureRule;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct StaticSweepResult {
    /// UKF reference first, then BCF by components, then PF by particles.
    pub reports: Vec<MseReport>,
}

impl StaticSweepResult {
    pub fn table(&self) -> Table {
        Table::from_reports(&self.reports)
    }

    pub fn find(&self, filter: &str, setting: Option<usize>) -> Option<&MseReport> {
        self.reports.iter().find(|r| r.filter == filter && r.setting == setting)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSweepResult {
    /// One block of reports per mixing coefficient, in grid order.
    pub points: Vec<(f64, Vec<MseReport>)>,
}

impl NoiseSweepResult {
    pub fn table(&self) -> Table {
        let mut cols = vec!["mix_p"];
        cols.extend(MseReport::COLUMNS);
        let mut t = Table::new(&cols);
        for (p, reports) in &self.points {
            for r in reports {
                let mut row = vec![Cell::Float(*p)];
                row.extend(r.cells());
                t.push(row);
            }
        }
        t
    }

    fn mse_at(&self, p: f64, filter: &str, setting: Option<usize>) -> Option<f64> {
        self.points
            .iter()
            .find(|(q, _)| *q == p)?
            .1
            .iter()
            .find(|r| r.filter == filter && r.setting == setting)
            .map(|r| r.mse)
    }

    /// `MSE(p_e = 0) / MSE(p_e = 1)` for one filter configuration.
    pub fn degradation_ratio(&self, filter: &str, setting: Option<usize>) -> Option<f64> {
        Some(self.mse_at(0.0, filter, setting)? / self.mse_at(1.0, filter, setting)?)
    }

    pub fn ratio_table(&self) -> Table {
        let mut t = Table::new(&["filter", "setting", "mse_uniform", "mse_gaussian", "degradation_ratio"]);
        if let Some((_, reports)) = self.points.first() {
            for r in reports {
                if let (Some(lo), Some(hi)) = (
                    self.mse_at(0.0, &r.filter, r.setting),
                    self.mse_at(1.0, &r.filter, r.setting),
                ) {
                    t.push(vec![
                        Cell::Text(r.filter.clone()),
                        r.setting.map_or(Cell::Empty, |s| Cell::Int(s as i64)),
                        Cell::Float(lo),
                        Cell::Float(hi),
                        Cell::Float(lo / hi),
                    ]);
                }
            }
        }
        t
    }
}

fn roster(components: &[usize], particles: &[usize]) -> Vec<FilterSpec> {
    std::iter::once(FilterSpec::Ukf)
        .chain(components.iter().map(|&m| FilterSpec::Bcf { components: m }))
        .chain(particles.iter().map(|&n| FilterSpec::Pf { particles: n }))
        .collect()
}

pub(crate) fn prior_cov(model: &NetworkModel, cfg: &ExperimentConfig) -> DMatrix<f64> {
    let n = model.state_dim() / 2;
    let diag = DVector::from_fn(2 * n, |i, _| {
        if i < n {
            cfg.prior.vm_std.powi(2)
        } else {
            cfg.prior.va_std.powi(2)
        }
    });
    DMatrix::from_diagonal(&diag)
}

/// Per-trial squared errors and fallback flags for each filter at one mixing coefficient.
fn sweep(
    model: &NetworkModel,
    truth: &StateVector,
    cfg: &ExperimentConfig,
    filters: &[FilterSpec],
    mix_p: f64,
) -> Result<Vec<MseReport>, HarnessError> {
    let d = truth.dim();
    let rule = QuadratureRule::default_for(d)?;
    let cov = prior_cov(model, cfg);
    let chol = cov.clone().cholesky().expect("diagonal prior is positive definite").l();
    let bcf = BcfSettings {
        iterations: cfg.roster.bcf_iterations,
        diagonal: cfg.roster.bcf_diagonal,
    };
    let fixed_obs = if cfg.plan.redraw {
        None
    } else {
        let plan = plan_for_trial(model, cfg, 0);
        Some((GridObservation::new(model, &plan)?, plan))
    };

    let per_trial: Vec<Vec<(f64, bool)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let owned;
            let (obs, plan) = match &fixed_obs {
                Some((o, p)) => (o, p),
                None => {
                    let plan = plan_for_trial(model, cfg, trial);
                    owned = (GridObservation::new(model, &plan)?, plan);
                    (&owned.0, &owned.1)
                }
            };
            let nm = noise_for_plan(plan, cfg, mix_p)?;
            let mut noise_rng = rng::stream(cfg.seed, &[rng::tag("static-noise"), trial as u64]);
            let y = obs.evaluate(truth.as_vector()) + nm.sample_with(&mut noise_rng);
            let mut prior_rng = rng::stream(cfg.seed, &[rng::tag("static-prior"), trial as u64]);
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut prior_rng));
            let belief = PredictedBelief::new(truth.as_vector() + &chol * z, cov.clone())?;
            let ctx = LikelihoodContext::new(obs, &y, &nm)?;
            let trial_seed = rng::derive_seed(cfg.seed, &[rng::tag("static-filter"), trial as u64]);
            filters
                .iter()
                .map(|&spec| {
                    let out = update_from_prior(spec, &belief, &ctx, bcf, &rule, trial_seed)?;
                    Ok(((out.estimate - truth.as_vector()).norm_squared(), out.fallback))
                })
                .collect()
        })
        .collect::<Result<_, HarnessError>>()?;

    let lines = model.bus_count();
    Ok(filters
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let samples: Vec<f64> = per_trial.iter().map(|row| row[k].0).collect();
            let fallbacks = per_trial.iter().filter(|row| row[k].1).count();
            MseReport::from_samples(
                spec.name(),
                spec.setting(),
                &samples,
                fallbacks,
                lines,
                cfg.nominal_volts,
            )
        })
        .collect())
}

fn nominal_truth(model: &NetworkModel) -> Result<StateVector, HarnessError> {
    Ok(solve_power_flow(model, &LoadTable::nominal(model), 1e-10, 30)?)
}

/// MSE of the UKF reference, BCF over its component list and PF over its particle list.
pub fn run_static_sweep(cfg: &ExperimentConfig) -> Result<StaticSweepResult, HarnessError> {
    cfg.validate()?;
    let model = load_network(cfg)?;
    let truth = nominal_truth(&model)?;
    let filters = roster(&cfg.roster.bcf_components, &cfg.roster.pf_particles);
    Ok(StaticSweepResult {
        reports: sweep(&model, &truth, cfg, &filters, cfg.noise.mix_p)?,
    })
}

/// The static protocol repeated for each mixing coefficient of the grid.
pub fn run_noise_sweep(cfg: &ExperimentConfig) -> Result<NoiseSweepResult, HarnessError> {
    cfg.validate()?;
    if !cfg.pe_grid.contains(&0.0) || !cfg.pe_grid.contains(&1.0) {
        return Err(HarnessError::InvalidConfig(
            "noise.pe_grid must contain both 0 and 1".into(),
        ));
    }
    let model = load_network(cfg)?;
    let truth = nominal_truth(&model)?;
    let filters = roster(&cfg.roster.noise_bcf_components, &cfg.roster.noise_pf_particles);
    let points = cfg
        .pe_grid
        .iter()
        .map(|&p| Ok((p, sweep(&model, &truth, cfg, &filters, p)?)))
        .collect::<Result<_, HarnessError>>()?;
    Ok(NoiseSweepResult { points })
}
