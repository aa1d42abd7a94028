//! Time-stepped tracking: smoother forecast, measurement update, smoother absorb.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{
    load_network, mean_and_std_error, noise_for_plan, plan_for_trial, BcfSettings, Cell, ExperimentConfig, FilterSpec,
    HarnessError, MseReport, Table,
};
use crate::dynamics::{
    generate_load_trajectory, ground_truth_states, holt_absorb, holt_predict, HoltParams, HoltState, LoadScenario,
};
use crate::filters::{
    bcf_condense, lsq_estimate, pf_mmse, pf_propagate, pf_resample, pf_update, ukf_update, BcfOptions, FilterError,
    LikelihoodContext, LsqOptions, MeasurementModel, ParticleEnsemble, PredictedBelief,
};
use crate::netmodel::NetworkModel;
use crate::powerflow::GridObservation;
use crate::quadrature::QuadratureRule;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicResult {
    pub filters: Vec<FilterSpec>,
    /// Per-run MSE over the tracked steps, summarised across runs.
    pub summary: Vec<MseReport>,
    /// Mean squared error and its standard error per filter and tracked step.
    pub traces: Vec<Vec<(f64, f64)>>,
    /// Index of the first tracked step (the smoother is seeded by the two before it).
    pub first_step: usize,
}

impl DynamicResult {
    pub fn table(&self) -> Table {
        Table::from_reports(&self.summary)
    }

    pub fn trace_table(&self) -> Table {
        let mut t = Table::new(&["filter", "setting", "step", "mse_per_unit", "std_error", "trials"]);
        for ((spec, trace), report) in self.filters.iter().zip(&self.traces).zip(&self.summary) {
            for (k, (m, se)) in trace.iter().enumerate() {
                t.push(vec![
                    Cell::Text(spec.name().into()),
                    spec.setting().map_or(Cell::Empty, |s| Cell::Int(s as i64)),
                    Cell::Int((self.first_step + k) as i64),
                    Cell::Float(*m),
                    Cell::Float(*se),
                    Cell::Int(report.trials as i64),
                ]);
            }
        }
        t
    }

    pub fn find(&self, filter: &str, setting: Option<usize>) -> Option<&MseReport> {
        self.summary.iter().find(|r| r.filter == filter && r.setting == setting)
    }

    /// Sample variance of a filter's mean trace across steps.
    pub fn trace_variance(&self, filter: &str, setting: Option<usize>) -> Option<f64> {
        let k = self
            .filters
            .iter()
            .position(|s| s.name() == filter && s.setting() == setting)?;
        let xs: Vec<f64> = self.traces[k].iter().map(|(m, _)| *m).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        Some(xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
    }
}

fn roster(cfg: &ExperimentConfig) -> Vec<FilterSpec> {
    [FilterSpec::Lsq, FilterSpec::Ukf]
        .into_iter()
        .chain(
            cfg.roster
                .dynamic_bcf_components
                .iter()
                .map(|&m| FilterSpec::Bcf { components: m }),
        )
        .chain(
            cfg.roster
                .dynamic_pf_particles
                .iter()
                .map(|&n| FilterSpec::Pf { particles: n }),
        )
        .collect()
}

/// Per-filter state carried between steps.
struct Track {
    spec: FilterSpec,
    holt: HoltState,
    cov: DMatrix<f64>,
    ensemble: Option<ParticleEnsemble>,
    rng: Rng,
    seed: u64,
    fallbacks: usize,
}

struct StepContext<'a> {
    params: &'a HoltParams,
    ctx: LikelihoodContext<'a>,
    rule: &'a QuadratureRule,
    bcf: BcfSettings,
    resample_threshold: f64,
    step: usize,
}

impl Track {
    fn step(&mut self, sc: &StepContext<'_>) -> Result<DVector<f64>, HarnessError> {
        let pred = holt_predict(&self.holt, sc.params)?;
        let prior_cov = pred.propagate_cov(&self.cov, sc.params);
        let estimate = match self.spec {
            FilterSpec::Lsq => {
                let out = lsq_estimate(&sc.ctx, &pred.state, &LsqOptions::default())?;
                self.cov = prior_cov;
                out.estimate
            }
            FilterSpec::Ukf | FilterSpec::Ekf => {
                let belief = PredictedBelief::new(pred.state.clone(), prior_cov)?;
                let out = if self.spec == FilterSpec::Ukf {
                    ukf_update(&belief, &sc.ctx)?
                } else {
                    crate::filters::ekf_update(&belief, &sc.ctx)?
                };
                self.cov = out.covariance;
                out.estimate
            }
            FilterSpec::Bcf { components } => {
                let belief = PredictedBelief::new(pred.state.clone(), prior_cov)?;
                let opts = BcfOptions {
                    components,
                    iterations: sc.bcf.iterations,
                    diagonal: sc.bcf.diagonal,
                    seed: rng::derive_seed(self.seed, &[sc.step as u64]),
                };
                match bcf_condense(&belief, &sc.ctx, &opts, sc.rule) {
                    Ok((_, summary)) => {
                        self.cov = summary.covariance;
                        summary.estimate
                    }
                    Err(FilterError::InvalidArgument(_)) => {
                        self.fallbacks += 1;
                        self.cov = belief.cov;
                        belief.mean
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            FilterSpec::Pf { .. } => {
                let ens = self.ensemble.take().expect("particle track carries an ensemble");
                let moved = pf_propagate(&ens, &pred, &sc.params.process_noise_diag, &mut self.rng);
                let posterior = match pf_update(&moved, &sc.ctx) {
                    Ok(p) => p,
                    Err(FilterError::AllWeightsZero) => {
                        self.fallbacks += 1;
                        moved
                    }
                    Err(e) => return Err(e.into()),
                };
                let estimate = pf_mmse(&posterior);
                self.ensemble = Some(pf_resample(&posterior, sc.resample_threshold, &mut self.rng)?);
                estimate
            }
        };
        self.holt = holt_absorb(&self.holt, &estimate, sc.params)?;
        Ok(estimate)
    }
}

/// Squared error per tracked step for every filter, plus fallback counts.
fn run_trial(
    model: &NetworkModel,
    cfg: &ExperimentConfig,
    filters: &[FilterSpec],
    rule: &QuadratureRule,
    trial: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>), HarnessError> {
    let sc = &cfg.scenario;
    let scenario_seed = rng::derive_seed(cfg.seed, &[rng::tag("scenario"), trial as u64]);
    let mut scenario = LoadScenario::random(model, sc.varied_buses, scenario_seed)?.with_ramp_start(sc.ramp_start);
    scenario.ramp_rate = sc.ramp_rate;
    scenario.fluctuation = sc.fluctuation;
    scenario.horizon = sc.horizon;
    let truths = ground_truth_states(model, &generate_load_trajectory(model, &scenario)?)?;
    let d = model.state_dim();
    let params = HoltParams::isotropic(
        cfg.holt.alpha,
        cfg.holt.beta,
        d,
        cfg.holt.process_noise,
        cfg.holt.initial_cov,
    )?;

    let plan = plan_for_trial(model, cfg, trial);
    let obs = GridObservation::new(model, &plan)?;
    let nm = noise_for_plan(&plan, cfg, cfg.noise.mix_p)?;
    let bcf = BcfSettings {
        iterations: cfg.roster.bcf_iterations,
        diagonal: cfg.roster.bcf_diagonal,
    };

    let (x0, x1) = (truths[0].as_vector(), truths[1].as_vector());
    let mut tracks = filters
        .iter()
        .map(|&spec| {
            let seed = rng::derive_seed(
                cfg.seed,
                &[
                    rng::tag("dynamic-filter"),
                    trial as u64,
                    rng::tag(spec.name()),
                    spec.setting().unwrap_or(0) as u64,
                ],
            );
            let mut r = rng::stream(seed, &[]);
            let ensemble = match spec {
                FilterSpec::Pf { particles } => {
                    let start = PredictedBelief::new(x1.clone(), params.initial_cov())?;
                    Some(ParticleEnsemble::sample(&start, particles, &mut r)?)
                }
                _ => None,
            };
            Ok(Track {
                spec,
                holt: HoltState::from_pair(x0, x1),
                cov: params.initial_cov(),
                ensemble,
                rng: r,
                seed,
                fallbacks: 0,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let mut errors = vec![Vec::with_capacity(truths.len() - 2); filters.len()];
    for (step, truth) in truths.iter().enumerate().skip(2) {
        let mut noise_rng = rng::stream(cfg.seed, &[rng::tag("dynamic-noise"), trial as u64, step as u64]);
        let y = obs.evaluate(truth.as_vector()) + nm.sample_with(&mut noise_rng);
        let step_ctx = StepContext {
            params: &params,
            ctx: LikelihoodContext::new(&obs, &y, &nm)?,
            rule,
            bcf,
            resample_threshold: cfg.roster.resample_threshold,
            step,
        };
        for (track, errs) in tracks.iter_mut().zip(errors.iter_mut()) {
            let est = track.step(&step_ctx)?;
            errs.push((est - truth.as_vector()).norm_squared());
        }
    }
    Ok((errors, tracks.iter().map(|t| t.fallbacks).collect()))
}

/// Tracks a ramping load scenario with LSQ, UKF, BCF and PF.
pub fn run_dynamic_sim(cfg: &ExperimentConfig) -> Result<DynamicResult, HarnessError> {
    cfg.validate()?;
    let model = load_network(cfg)?;
    let filters = roster(cfg);
    let rule = QuadratureRule::default_for(model.state_dim())?;
    let runs: Vec<(Vec<Vec<f64>>, Vec<usize>)> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| run_trial(&model, cfg, &filters, &rule, trial))
        .collect::<Result<_, _>>()?;

    let steps = cfg.scenario.horizon - 2;
    let lines = model.bus_count();
    let mut summary = Vec::with_capacity(filters.len());
    let mut traces = Vec::with_capacity(filters.len());
    for (k, spec) in filters.iter().enumerate() {
        let per_run: Vec<f64> = runs
            .iter()
            .map(|(errs, _)| errs[k].iter().sum::<f64>() / steps as f64)
            .collect();
        let fallbacks = runs.iter().map(|(_, f)| f[k]).sum();
        summary.push(MseReport::from_samples(
            spec.name(),
            spec.setting(),
            &per_run,
            fallbacks,
            lines,
            cfg.nominal_volts,
        ));
        traces.push(
            (0..steps)
                .map(|s| {
                    let at: Vec<f64> = runs.iter().map(|(errs, _)| errs[k][s]).collect();
                    mean_and_std_error(&at)
                })
                .collect(),
        );
    }
    Ok(DynamicResult {
        filters,
        summary,
        traces,
        first_step: 2,
    })
}
