//! Scalar problems: a linear observation, a bimodal target and `h(x) = x² sin x`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{Cell, ExperimentConfig, FilterSpec, HarnessError, MseReport, Table};
use crate::filters::{
    bcf_condense, bcf_initialize, condense_step, ekf_update, BcfOptions, CoordinatewiseModel, GaussianMixture,
    LikelihoodContext, LinearModel, MeasurementModel, ParticleEnsemble, PredictedBelief,
};
use crate::noise::{ChannelNoiseSpec, NoiseModel};
use crate::quadrature::{tensor_rule, QuadratureRule};
use crate::rng;

const BIMODAL_MEANS: [f64; 2] = [-1.1, 1.1];
const BIMODAL_VAR: f64 = 0.1;
const GRID_LO: f64 = -3.0;
const GRID_STEP: f64 = 0.05;
const GRID_POINTS: usize = 121;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyResult {
    /// EKF first, then BCF by component count.
    pub linear: Vec<MseReport>,
    pub nonlinear: Vec<MseReport>,
    /// Columns: x, target, bcf, pf, ekf.
    pub densities: Vec<[f64; 5]>,
}

impl ToyResult {
    pub fn linear_table(&self) -> Table {
        Table::from_reports(&self.linear)
    }

    pub fn nonlinear_table(&self) -> Table {
        Table::from_reports(&self.nonlinear)
    }

    pub fn density_table(&self) -> Table {
        let mut t = Table::new(&["x", "target", "bcf", "pf", "ekf"]);
        for row in &self.densities {
            t.push(row.iter().map(|v| Cell::Float(*v)).collect());
        }
        t
    }

    /// Local maxima of a density column that exceed a tenth of its peak.
    pub fn mode_count(&self, column: usize) -> usize {
        let ys: Vec<f64> = self.densities.iter().map(|r| r[column]).collect();
        let peak = ys.iter().copied().fold(0.0, f64::max);
        ys.windows(3)
            .filter(|w| w[1] > w[0] && w[1] >= w[2] && w[1] > 0.1 * peak)
            .count()
    }
}

fn x2sinx(x: f64) -> f64 {
    x * x * x.sin()
}

/// MSE of EKF and BCF (each component count) over repeated scalar trials.
fn scalar_mse(
    cfg: &ExperimentConfig,
    model: &dyn MeasurementModel,
    h: fn(f64) -> f64,
    label: &str,
    rule: &QuadratureRule,
) -> Result<Vec<MseReport>, HarnessError> {
    let toy = &cfg.toy;
    let nm = NoiseModel::iid(toy.observations, ChannelNoiseSpec::gaussian(toy.noise_var.sqrt())?, 0);
    let belief = PredictedBelief::new(
        DVector::from_element(1, toy.prior_mean),
        DMatrix::from_element(1, 1, toy.prior_var),
    )?;
    let filters: Vec<FilterSpec> = std::iter::once(FilterSpec::Ekf)
        .chain(toy.components.iter().map(|&m| FilterSpec::Bcf { components: m }))
        .collect();
    let per_trial: Vec<Vec<f64>> = (0..toy.trials)
        .into_par_iter()
        .map(|trial| {
            let mut r = rng::stream(cfg.seed, &[rng::tag(label), trial as u64]);
            let y = DVector::from_element(toy.observations, h(toy.truth)) + nm.sample_with(&mut r);
            let ctx = LikelihoodContext::new(model, &y, &nm)?;
            filters
                .iter()
                .map(|&spec| {
                    let est = match spec {
                        FilterSpec::Bcf { components } => {
                            let opts = BcfOptions {
                                components,
                                iterations: toy.iterations,
                                diagonal: false,
                                seed: rng::derive_seed(cfg.seed, &[rng::tag(label), trial as u64, components as u64]),
                            };
                            bcf_condense(&belief, &ctx, &opts, rule)?.1.estimate[0]
                        }
                        _ => ekf_update(&belief, &ctx)?.estimate[0],
                    };
                    Ok((est - toy.truth).powi(2))
                })
                .collect()
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(filters
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let samples: Vec<f64> = per_trial.iter().map(|row| row[k]).collect();
            MseReport::from_samples(spec.name(), spec.setting(), &samples, 0, 1, 1.0)
        })
        .collect())
}

fn bimodal_log_density(x: f64) -> f64 {
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI * BIMODAL_VAR).ln();
    let terms: Vec<f64> = BIMODAL_MEANS
        .iter()
        .map(|m| 0.5f64.ln() + ln_norm - 0.5 * (x - m).powi(2) / BIMODAL_VAR)
        .collect();
    crate::filters::log_sum_exp(&terms)
}

fn densities(cfg: &ExperimentConfig, rule: &QuadratureRule) -> Result<Vec<[f64; 5]>, HarnessError> {
    let toy = &cfg.toy;
    let start = PredictedBelief::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0))?;
    let mut gm: GaussianMixture = bcf_initialize(&start, 2, rng::derive_seed(cfg.seed, &[rng::tag("toy-bimodal")]))?;
    for _ in 0..toy.iterations {
        gm = condense_step(&gm, |x| bimodal_log_density(x[0]), rule, false)?.0;
    }

    // Importance-weighted particles from the broad starting density.
    let mut r = rng::stream(cfg.seed, &[rng::tag("toy-bimodal-pf")]);
    let ens = ParticleEnsemble::sample(&start, toy.particles, &mut r)?;
    let log_target = |x: &DVector<f64>| bimodal_log_density(x[0]) - start.log_density(x);
    let weights: Vec<f64> = ens.particles().iter().map(log_target).collect();
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ens = ParticleEnsemble::new(
        ens.particles().to_vec(),
        weights.iter().map(|w| (w - max).exp()).collect(),
    )?;

    // Linearised filter fed with draws from the bimodal source.
    let source = [
        Normal::new(BIMODAL_MEANS[0], BIMODAL_VAR.sqrt()).expect("valid normal"),
        Normal::new(BIMODAL_MEANS[1], BIMODAL_VAR.sqrt()).expect("valid normal"),
    ];
    let ys = DVector::from_fn(toy.observations, |_, _| {
        let pick = usize::from(rand::Rng::random_bool(&mut r, 0.5));
        source[pick].sample(&mut r)
    });
    let nm = NoiseModel::iid(toy.observations, ChannelNoiseSpec::gaussian(BIMODAL_VAR.sqrt())?, 0);
    let model = LinearModel {
        matrix: DMatrix::from_element(toy.observations, 1, 1.0),
    };
    let flat = PredictedBelief::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 100.0))?;
    let ekf = ekf_update(&flat, &LikelihoodContext::new(&model, &ys, &nm)?)?;
    let (ekf_mean, ekf_var) = (ekf.estimate[0], ekf.covariance[(0, 0)]);

    Ok((0..GRID_POINTS)
        .map(|i| {
            let x = GRID_LO + GRID_STEP * i as f64;
            let xv = DVector::from_element(1, x);
            let bcf = gm.log_density(&xv).map(f64::exp).unwrap_or(0.0);
            let pf: f64 = ens
                .particles()
                .iter()
                .zip(ens.weights())
                .filter(|(p, _)| (p[0] - x).abs() < 0.5 * GRID_STEP)
                .map(|(_, w)| w)
                .sum::<f64>()
                / GRID_STEP;
            let ekf = (-0.5 * (x - ekf_mean).powi(2) / ekf_var).exp() / (2.0 * std::f64::consts::PI * ekf_var).sqrt();
            [x, bimodal_log_density(x).exp(), bcf, pf, ekf]
        })
        .collect())
}

/// Linear and `x² sin x` MSE tables plus density grids for the bimodal target.
pub fn run_toy_examples(cfg: &ExperimentConfig) -> Result<ToyResult, HarnessError> {
    cfg.validate()?;
    let rule = tensor_rule(cfg.toy.gh_order, 1)?;
    let n = cfg.toy.observations;
    let linear_model = LinearModel {
        matrix: DMatrix::from_element(n, 1, 1.0),
    };
    let nonlinear_model = CoordinatewiseModel {
        dim: 1,
        repeats: n,
        map: x2sinx,
    };
    Ok(ToyResult {
        linear: scalar_mse(cfg, &linear_model, |x| x, "toy-linear", &rule)?,
        nonlinear: scalar_mse(cfg, &nonlinear_model, x2sinx, "toy-nonlinear", &rule)?,
        densities: densities(cfg, &rule)?,
    })
}
