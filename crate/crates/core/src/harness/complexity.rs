//! Cost of reaching a fixed dimension-free error as the state dimension grows.
//!
//! The problem family replicates `h(x) = x² sin x` on every coordinate. Coordinates are
//! independent, so the exact posterior mean is available per coordinate by dense 1-D
//! quadrature; its Monte-Carlo error second moment defines the weighting `J` of the
//! dimension-free error `r = E[eᵀ J e] / d`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{Cell, ExperimentConfig, HarnessError, Table};
use crate::filters::{
    bcf_condense, pf_mmse, pf_update, BcfOptions, CoordinatewiseModel, FilterError, LikelihoodContext,
    MeasurementModel, ParticleEnsemble, PredictedBelief,
};
use crate::noise::{ChannelNoiseSpec, NoiseModel};
use crate::quadrature::QuadratureRule;
use crate::rng;

const REFERENCE_GRID: usize = 4001;
const TIMED_TRIALS: usize = 20;

fn x2sinx(x: f64) -> f64 {
    x * x * x.sin()
}

/// Error curve of one filter at one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DimensionCurve {
    pub filter: &'static str,
    pub dim: usize,
    /// `(setting, r)` pairs in sweep order.
    pub points: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityRow {
    pub dim: usize,
    pub components: usize,
    pub particles: usize,
    pub bcf_r: f64,
    pub pf_r: f64,
    /// Likelihood evaluations per update at the chosen settings.
    pub bcf_evaluations: usize,
    pub pf_evaluations: usize,
    /// Mean single-threaded wall time per update, when timing is enabled.
    pub bcf_seconds: Option<f64>,
    pub pf_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityResult {
    pub rows: Vec<ComplexityRow>,
    pub curves: Vec<DimensionCurve>,
    pub target_r: f64,
}

impl ComplexityResult {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&[
            "dim",
            "bcf_components",
            "pf_particles",
            "bcf_r",
            "pf_r",
            "bcf_evaluations",
            "pf_evaluations",
            "target_r",
        ]);
        for r in &self.rows {
            t.push(vec![
                Cell::Int(r.dim as i64),
                Cell::Int(r.components as i64),
                Cell::Int(r.particles as i64),
                Cell::Float(r.bcf_r),
                Cell::Float(r.pf_r),
                Cell::Int(r.bcf_evaluations as i64),
                Cell::Int(r.pf_evaluations as i64),
                Cell::Float(self.target_r),
            ]);
        }
        t
    }

    /// Wall times; only rows with timing recorded.
    pub fn timing_table(&self) -> Table {
        let mut t = Table::new(&["dim", "bcf_components", "pf_particles", "bcf_seconds", "pf_seconds"]);
        for r in &self.rows {
            if let (Some(b), Some(p)) = (r.bcf_seconds, r.pf_seconds) {
                t.push(vec![
                    Cell::Int(r.dim as i64),
                    Cell::Int(r.components as i64),
                    Cell::Int(r.particles as i64),
                    Cell::Float(b),
                    Cell::Float(p),
                ]);
            }
        }
        t
    }

    pub fn curve_table(&self) -> Table {
        let mut t = Table::new(&["filter", "dim", "setting", "r"]);
        for c in &self.curves {
            for (s, r) in &c.points {
                t.push(vec![
                    Cell::Text(c.filter.into()),
                    Cell::Int(c.dim as i64),
                    Cell::Int(*s as i64),
                    Cell::Float(*r),
                ]);
            }
        }
        t
    }
}

/// One synthetic problem instance.
struct Instance {
    truth: DVector<f64>,
    y: DVector<f64>,
}

/// Posterior mean of each coordinate by trapezoid quadrature on a dense grid.
fn reference_estimate(
    y: &DVector<f64>,
    d: usize,
    repeats: usize,
    prior_mean: f64,
    prior_var: f64,
    noise_var: f64,
) -> DVector<f64> {
    let half = 10.0 * prior_var.sqrt();
    let step = 2.0 * half / (REFERENCE_GRID - 1) as f64;
    DVector::from_fn(d, |k, _| {
        let obs = &y.as_slice()[k * repeats..(k + 1) * repeats];
        let logs: Vec<f64> = (0..REFERENCE_GRID)
            .map(|i| {
                let x = prior_mean - half + step * i as f64;
                let h = x2sinx(x);
                -0.5 * (x - prior_mean).powi(2) / prior_var
                    - 0.5 * obs.iter().map(|v| (v - h).powi(2)).sum::<f64>() / noise_var
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for (i, l) in logs.iter().enumerate() {
            let w = (l - max).exp() * if i == 0 || i == REFERENCE_GRID - 1 { 0.5 } else { 1.0 };
            num += w * (prior_mean - half + step * i as f64);
            den += w;
        }
        num / den
    })
}

fn bcf_estimate(
    belief: &PredictedBelief,
    ctx: &LikelihoodContext<'_>,
    components: usize,
    iterations: usize,
    rule: &QuadratureRule,
    seed: u64,
) -> Result<DVector<f64>, HarnessError> {
    let opts = BcfOptions {
        components,
        iterations,
        diagonal: false,
        seed,
    };
    match bcf_condense(belief, ctx, &opts, rule) {
        Ok((_, s)) => Ok(s.estimate),
        Err(FilterError::InvalidArgument(_)) => Ok(belief.mean.clone()),
        Err(e) => Err(e.into()),
    }
}

fn pf_estimate(
    belief: &PredictedBelief,
    ctx: &LikelihoodContext<'_>,
    particles: usize,
    seed: u64,
) -> Result<DVector<f64>, HarnessError> {
    let mut r = rng::stream(seed, &[]);
    let ens = ParticleEnsemble::sample(belief, particles, &mut r)?;
    match pf_update(&ens, ctx) {
        Ok(post) => Ok(pf_mmse(&post)),
        Err(FilterError::AllWeightsZero) => Ok(pf_mmse(&ens)),
        Err(e) => Err(e.into()),
    }
}

/// Weighted error `eᵀ J e / d` with `J = I / s`.
fn dimension_free(errors: &[DVector<f64>], scale: f64) -> f64 {
    let d = errors[0].len() as f64;
    errors.iter().map(|e| e.norm_squared() / scale / d).sum::<f64>() / errors.len() as f64
}

fn first_reaching(points: &[(usize, f64)], target: f64) -> Option<(usize, f64)> {
    points.iter().copied().find(|(_, r)| *r <= target)
}

fn time_updates<F>(instances: &[Instance], mut update: F) -> Result<f64, HarnessError>
where
    F: FnMut(usize, &Instance) -> Result<DVector<f64>, HarnessError> + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    let timed = &instances[..instances.len().min(TIMED_TRIALS)];
    pool.install(|| {
        let start = Instant::now();
        for (t, inst) in timed.iter().enumerate() {
            std::hint::black_box(update(t, inst)?);
        }
        Ok(start.elapsed().as_secs_f64() / timed.len() as f64)
    })
}

/// Problem instances and error curves for every dimension, before any setting is chosen.
pub struct ComplexitySweep {
    pub curves: Vec<DimensionCurve>,
    dims: Vec<DimensionProblem>,
}

/// One dimension of the benchmark.
struct DimensionProblem {
    dim: usize,
    model: CoordinatewiseModel,
    noise: NoiseModel,
    belief: PredictedBelief,
    rule: QuadratureRule,
    instances: Vec<Instance>,
}

fn seed_for(master: u64, d: usize, filter: &str, setting: usize, trial: usize) -> u64 {
    rng::derive_seed(
        master,
        &[
            rng::tag("complexity-filter"),
            d as u64,
            rng::tag(filter),
            setting as u64,
            trial as u64,
        ],
    )
}

/// Draws the instances and evaluates `r` over the full BCF and PF setting grids.
pub fn sweep_complexity(cfg: &ExperimentConfig) -> Result<ComplexitySweep, HarnessError> {
    cfg.validate()?;
    let c = &cfg.complexity;
    let mut curves = Vec::with_capacity(2 * c.dims.len());
    let mut dims = Vec::with_capacity(c.dims.len());
    for &d in &c.dims {
        let model = CoordinatewiseModel {
            dim: d,
            repeats: c.repeats,
            map: x2sinx,
        };
        let nm = NoiseModel::iid(d * c.repeats, ChannelNoiseSpec::gaussian(c.noise_var.sqrt())?, 0);
        let belief = PredictedBelief::new(
            DVector::from_element(d, c.prior_mean),
            DMatrix::from_diagonal_element(d, d, c.prior_var),
        )?;
        let rule = QuadratureRule::default_for(d)?;

        let instances: Vec<Instance> = (0..c.trials)
            .map(|t| {
                let mut r = rng::stream(cfg.seed, &[rng::tag("complexity"), d as u64, t as u64]);
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut r));
                let truth = DVector::from_element(d, c.prior_mean) + z * c.prior_var.sqrt();
                let y = model.evaluate(&truth) + nm.sample_with(&mut r);
                Instance { truth, y }
            })
            .collect();
        let reference: Vec<DVector<f64>> = instances
            .par_iter()
            .map(|inst| reference_estimate(&inst.y, d, c.repeats, c.prior_mean, c.prior_var, c.noise_var) - &inst.truth)
            .collect();
        let scale = reference.iter().map(|e| e.norm_squared()).sum::<f64>() / (c.trials * d) as f64;

        let sweep = |filter: &'static str, settings: &[usize]| -> Result<DimensionCurve, HarnessError> {
            let points = settings
                .iter()
                .map(|&s| {
                    let errors: Vec<DVector<f64>> = instances
                        .par_iter()
                        .enumerate()
                        .map(|(t, inst)| {
                            let ctx = LikelihoodContext::new(&model, &inst.y, &nm)?;
                            let seed = seed_for(cfg.seed, d, filter, s, t);
                            let est = if filter == "bcf" {
                                bcf_estimate(&belief, &ctx, s, c.iterations, &rule, seed)?
                            } else {
                                pf_estimate(&belief, &ctx, s, seed)?
                            };
                            Ok(est - &inst.truth)
                        })
                        .collect::<Result<_, HarnessError>>()?;
                    Ok((s, dimension_free(&errors, scale)))
                })
                .collect::<Result<_, HarnessError>>()?;
            Ok(DimensionCurve { filter, dim: d, points })
        };
        curves.push(sweep("bcf", &c.components)?);
        curves.push(sweep("pf", &c.particles)?);
        dims.push(DimensionProblem {
            dim: d,
            model,
            noise: nm,
            belief,
            rule,
            instances,
        });
    }
    Ok(ComplexitySweep { curves, dims })
}

impl ComplexitySweep {
    fn curve(&self, filter: &str, dim: usize) -> &DimensionCurve {
        self.curves
            .iter()
            .find(|c| c.filter == filter && c.dim == dim)
            .expect("every dimension has both curves")
    }

    /// Curves only, as a table.
    pub fn curve_table(&self) -> Table {
        ComplexityResult {
            rows: Vec::new(),
            curves: self.curves.clone(),
            target_r: f64::NAN,
        }
        .curve_table()
    }

    /// Smallest settings reaching `target_r` per dimension, timed when configured.
    pub fn select(&self, cfg: &ExperimentConfig) -> Result<ComplexityResult, HarnessError> {
        let c = &cfg.complexity;
        let mut rows = Vec::with_capacity(self.dims.len());
        for p in &self.dims {
            let d = p.dim;
            let unreachable = |filter: &str| HarnessError::TargetUnreachable {
                filter: filter.into(),
                dim: d,
                target: c.target_r,
            };
            let (m, bcf_r) =
                first_reaching(&self.curve("bcf", d).points, c.target_r).ok_or_else(|| unreachable("bcf"))?;
            let (n, pf_r) = first_reaching(&self.curve("pf", d).points, c.target_r).ok_or_else(|| unreachable("pf"))?;

            let (bcf_seconds, pf_seconds) = if c.timing {
                let bcf_t = time_updates(&p.instances, |t, inst| {
                    let ctx = LikelihoodContext::new(&p.model, &inst.y, &p.noise)?;
                    bcf_estimate(
                        &p.belief,
                        &ctx,
                        m,
                        c.iterations,
                        &p.rule,
                        seed_for(cfg.seed, d, "bcf", m, t),
                    )
                })?;
                let pf_t = time_updates(&p.instances, |t, inst| {
                    let ctx = LikelihoodContext::new(&p.model, &inst.y, &p.noise)?;
                    pf_estimate(&p.belief, &ctx, n, seed_for(cfg.seed, d, "pf", n, t))
                })?;
                (Some(bcf_t), Some(pf_t))
            } else {
                (None, None)
            };

            rows.push(ComplexityRow {
                dim: d,
                components: m,
                particles: n,
                bcf_r,
                pf_r,
                bcf_evaluations: c.iterations * m * p.rule.len(),
                pf_evaluations: n,
                bcf_seconds,
                pf_seconds,
            });
        }
        Ok(ComplexityResult {
            rows,
            curves: self.curves.clone(),
            target_r: c.target_r,
        })
    }
}

/// Sweeps every dimension, then picks and optionally times the settings reaching the target.
pub fn run_complexity_bench(cfg: &ExperimentConfig) -> Result<ComplexityResult, HarnessError> {
    sweep_complexity(cfg)?.select(cfg)
}
