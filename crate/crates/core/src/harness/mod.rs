//! Experiment drivers: Monte-Carlo sweeps over the grid model, the time-stepped tracking
//! simulation, scalar toy problems and the dimension-scaling benchmark.
//!
//! Every random draw comes from a stream derived from the master seed and the consumer's
//! tags, and trials are reduced in index order, so a configuration and seed fully determine
//! every emitted table.

mod complexity;
mod config;
mod dynamic;
mod report;
mod sweep;
mod toy;

use nalgebra::DVector;
use thiserror::Error;

use crate::dynamics::DynamicsError;
use crate::filters::{
    bcf_condense, ekf_update, lsq_estimate, pf_mmse, pf_update, ukf_update, BcfOptions, FilterError, LikelihoodContext,
    LsqOptions, ParticleEnsemble, PredictedBelief,
};
use crate::netmodel::{ieee14, load_case, CaseError, NetworkModel};
use crate::noise::{NoiseError, NoiseModel};
use crate::powerflow::{MeasurementPlan, PowerFlowError};
use crate::quadrature::{QuadratureError, QuadratureRule};
use crate::rng;

pub use complexity::{
    run_complexity_bench, sweep_complexity, ComplexityResult, ComplexityRow, ComplexitySweep, DimensionCurve,
};
pub use config::{
    ComplexitySpec, Experiment, ExperimentConfig, FilterRoster, HoltSpec, NoiseSpec, PlanSpec, PriorSpec, ScenarioSpec,
    ToySpec,
};
pub use dynamic::{run_dynamic_sim, DynamicResult};
pub use report::{emit_csv, format_sig9, mean_and_std_error, mse, net_mse, Cell, MseReport, Table};
pub use sweep::{run_noise_sweep, run_static_sweep, NoiseSweepResult, StaticSweepResult};
pub use toy::{run_toy_examples, ToyResult};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{estimates} estimates against {truths} true states")]
    LengthMismatch { estimates: usize, truths: usize },
    #[error("{filter} did not reach r = {target} at d = {dim} within the sweep")]
    TargetUnreachable { filter: String, dim: usize, target: f64 },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// A filter together with its size parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterSpec {
    Lsq,
    Ekf,
    Ukf,
    Bcf { components: usize },
    Pf { particles: usize },
}

impl FilterSpec {
    pub fn name(self) -> &'static str {
        match self {
            FilterSpec::Lsq => "lsq",
            FilterSpec::Ekf => "ekf",
            FilterSpec::Ukf => "ukf",
            FilterSpec::Bcf { .. } => "bcf",
            FilterSpec::Pf { .. } => "pf",
        }
    }

    pub fn setting(self) -> Option<usize> {
        match self {
            FilterSpec::Bcf { components } => Some(components),
            FilterSpec::Pf { particles } => Some(particles),
            _ => None,
        }
    }

    /// Tags identifying this filter's random stream within a trial.
    fn stream_tags(self) -> [u64; 2] {
        [rng::tag(self.name()), self.setting().unwrap_or(0) as u64]
    }
}

pub(crate) fn load_network(cfg: &ExperimentConfig) -> Result<NetworkModel, HarnessError> {
    match &cfg.case {
        Some(path) => Ok(load_case(path)?),
        None => Ok(ieee14()),
    }
}

pub(crate) fn plan_for_trial(model: &NetworkModel, cfg: &ExperimentConfig, trial: usize) -> MeasurementPlan {
    let seed = if cfg.plan.redraw {
        rng::derive_seed(cfg.plan.seed, &[rng::tag("plan-trial"), trial as u64])
    } else {
        cfg.plan.seed
    };
    MeasurementPlan::random(model, cfg.plan.count, seed)
}

pub(crate) fn noise_for_plan(
    plan: &MeasurementPlan,
    cfg: &ExperimentConfig,
    mix_p: f64,
) -> Result<NoiseModel, HarnessError> {
    Ok(NoiseModel::for_plan(
        plan,
        cfg.noise.power_std,
        cfg.noise.voltage_std,
        mix_p,
        cfg.noise.halfwidth_factor,
        0,
    )?)
}

/// Result of one measurement update.
#[derive(Debug, Clone)]
pub(crate) struct Update {
    pub estimate: DVector<f64>,
    /// The likelihood vanished on every node or particle; the prior was kept.
    pub fallback: bool,
}

/// Shared BCF settings for a sweep.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BcfSettings {
    pub iterations: usize,
    pub diagonal: bool,
}

/// Update-only step of one filter from a common prior.
pub(crate) fn update_from_prior(
    spec: FilterSpec,
    belief: &PredictedBelief,
    ctx: &LikelihoodContext<'_>,
    bcf: BcfSettings,
    rule: &QuadratureRule,
    seed: u64,
) -> Result<Update, HarnessError> {
    let keep_prior = || Update {
        estimate: belief.mean.clone(),
        fallback: true,
    };
    let seed = rng::derive_seed(seed, &spec.stream_tags());
    match spec {
        FilterSpec::Lsq => {
            let out = lsq_estimate(ctx, &belief.mean, &LsqOptions::default())?;
            Ok(Update {
                estimate: out.estimate,
                fallback: false,
            })
        }
        FilterSpec::Ekf | FilterSpec::Ukf => {
            let out = if spec == FilterSpec::Ekf {
                ekf_update(belief, ctx)?
            } else {
                ukf_update(belief, ctx)?
            };
            Ok(Update {
                estimate: out.estimate,
                fallback: false,
            })
        }
        FilterSpec::Bcf { components } => {
            let opts = BcfOptions {
                components,
                iterations: bcf.iterations,
                diagonal: bcf.diagonal,
                seed,
            };
            match bcf_condense(belief, ctx, &opts, rule) {
                Ok((_, summary)) => Ok(Update {
                    estimate: summary.estimate,
                    fallback: false,
                }),
                Err(FilterError::InvalidArgument(_)) => Ok(keep_prior()),
                Err(e) => Err(e.into()),
            }
        }
        FilterSpec::Pf { particles } => {
            let mut r = rng::stream(seed, &[rng::tag("pf-sample")]);
            let ens = ParticleEnsemble::sample(belief, particles, &mut r)?;
            match pf_update(&ens, ctx) {
                Ok(post) => Ok(Update {
                    estimate: pf_mmse(&post),
                    fallback: false,
                }),
                Err(FilterError::AllWeightsZero) => Ok(Update {
                    estimate: pf_mmse(&ens),
                    fallback: true,
                }),
                Err(e) => Err(e.into()),
            }
        }
    }
}
