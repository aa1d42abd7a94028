//! Line-oriented `key = value` experiment configuration.
//!
//! Keys mirror the fields of [`ExperimentConfig`] with a dotted prefix per section, e.g.
//! `noise.power_std = 0.02` or `bcf.components = 1,2,3`. Lines starting with `#` are
//! comments. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::HarnessError;

/// Which experiment a configuration is being scaled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    StaticSweep,
    NoiseSweep,
    DynamicSim,
    Toy,
    Complexity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanSpec {
    pub count: usize,
    pub seed: u64,
    /// Draw a fresh plan per trial instead of one plan for the whole experiment.
    pub redraw: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub power_std: f64,
    pub voltage_std: f64,
    pub halfwidth_factor: f64,
    pub mix_p: f64,
}

/// Gaussian prior shared by all filters in the static experiments: centred on a draw
/// around the true state with these per-coordinate standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub vm_std: f64,
    pub va_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRoster {
    pub bcf_components: Vec<usize>,
    pub pf_particles: Vec<usize>,
    pub bcf_iterations: usize,
    pub bcf_diagonal: bool,
    pub resample_threshold: f64,
    pub noise_bcf_components: Vec<usize>,
    pub noise_pf_particles: Vec<usize>,
    pub dynamic_bcf_components: Vec<usize>,
    pub dynamic_pf_particles: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub varied_buses: usize,
    pub ramp_rate: f64,
    pub ramp_start: usize,
    pub fluctuation: f64,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoltSpec {
    pub alpha: f64,
    pub beta: f64,
    pub process_noise: f64,
    pub initial_cov: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub trials: usize,
    pub truth: f64,
    pub observations: usize,
    pub noise_var: f64,
    pub prior_mean: f64,
    pub prior_var: f64,
    pub components: Vec<usize>,
    pub iterations: usize,
    pub gh_order: usize,
    pub particles: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexitySpec {
    pub dims: Vec<usize>,
    pub target_r: f64,
    pub components: Vec<usize>,
    pub particles: Vec<usize>,
    pub trials: usize,
    pub iterations: usize,
    pub repeats: usize,
    pub noise_var: f64,
    pub prior_mean: f64,
    pub prior_var: f64,
    /// Record wall-clock update times; these make the output machine dependent.
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// `None` selects the bundled IEEE 14-bus case.
    pub case: Option<PathBuf>,
    pub seed: u64,
    pub trials: usize,
    pub out_dir: PathBuf,
    pub plan: PlanSpec,
    pub noise: NoiseSpec,
    pub prior: PriorSpec,
    pub roster: FilterRoster,
    pub pe_grid: Vec<f64>,
    pub scenario: ScenarioSpec,
    pub holt: HoltSpec,
    pub toy: ToySpec,
    pub complexity: ComplexitySpec,
    pub nominal_volts: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            case: None,
            seed: 2024,
            trials: 50,
            out_dir: PathBuf::from("out"),
            plan: PlanSpec {
                count: 28,
                seed: 0,
                redraw: false,
            },
            noise: NoiseSpec {
                power_std: 0.02,
                voltage_std: 0.001,
                halfwidth_factor: 5.0,
                mix_p: 1.0,
            },
            prior: PriorSpec {
                vm_std: 0.01,
                va_std: 0.02,
            },
            roster: FilterRoster {
                bcf_components: (1..=9).collect(),
                pf_particles: vec![500, 1000, 2000, 4000, 6000, 8000, 10000],
                bcf_iterations: 1,
                bcf_diagonal: false,
                resample_threshold: 0.5,
                noise_bcf_components: vec![1, 2, 3, 5, 9],
                noise_pf_particles: vec![200, 1000, 5000, 8000, 10000],
                dynamic_bcf_components: vec![1, 3, 9],
                dynamic_pf_particles: vec![10000],
            },
            pe_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            scenario: ScenarioSpec {
                varied_buses: 3,
                ramp_rate: 0.1,
                ramp_start: 10,
                fluctuation: 0.03,
                horizon: 50,
            },
            holt: HoltSpec {
                alpha: 0.81,
                beta: 0.56,
                process_noise: 1e-6,
                initial_cov: 1e-6,
            },
            toy: ToySpec {
                trials: 100,
                truth: 2.2,
                observations: 5,
                noise_var: 0.1,
                prior_mean: 2.0,
                prior_var: 1.0,
                components: (1..=9).collect(),
                iterations: 10,
                gh_order: 30,
                particles: 1000,
            },
            complexity: ComplexitySpec {
                dims: (1..=10).collect(),
                target_r: 2.0,
                components: vec![1, 2, 4, 8, 16, 32, 64],
                particles: vec![10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000, 20000, 50000, 100000],
                trials: 200,
                iterations: 5,
                repeats: 1,
                noise_var: 0.1,
                prior_mean: 1.2,
                prior_var: 0.09,
                timing: false,
            },
            nominal_volts: 110.0,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T, HarnessError> {
    raw.parse().map_err(|_| HarnessError::Config {
        line,
        message: format!("bad value `{raw}` for `{key}`"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Vec<T>, HarnessError> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(line, key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| HarnessError::Config {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            cfg.set(line, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), HarnessError> {
        let k = key;
        match key {
            "case" => self.case = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "seed" => self.seed = parse_value(line, k, v)?,
            "trials" => self.trials = parse_value(line, k, v)?,
            "out" => self.out_dir = PathBuf::from(v),
            "nominal_volts" => self.nominal_volts = parse_value(line, k, v)?,
            "plan.count" => self.plan.count = parse_value(line, k, v)?,
            "plan.seed" => self.plan.seed = parse_value(line, k, v)?,
            "plan.redraw" => self.plan.redraw = parse_value(line, k, v)?,
            "noise.power_std" => self.noise.power_std = parse_value(line, k, v)?,
            "noise.voltage_std" => self.noise.voltage_std = parse_value(line, k, v)?,
            "noise.halfwidth_factor" => self.noise.halfwidth_factor = parse_value(line, k, v)?,
            "noise.mix_p" => self.noise.mix_p = parse_value(line, k, v)?,
            "noise.pe_grid" => self.pe_grid = parse_list(line, k, v)?,
            "prior.vm_std" => self.prior.vm_std = parse_value(line, k, v)?,
            "prior.va_std" => self.prior.va_std = parse_value(line, k, v)?,
            "bcf.components" => self.roster.bcf_components = parse_list(line, k, v)?,
            "bcf.iterations" => self.roster.bcf_iterations = parse_value(line, k, v)?,
            "bcf.diagonal" => self.roster.bcf_diagonal = parse_value(line, k, v)?,
            "bcf.noise_components" => self.roster.noise_bcf_components = parse_list(line, k, v)?,
            "bcf.dynamic_components" => self.roster.dynamic_bcf_components = parse_list(line, k, v)?,
            "pf.particles" => self.roster.pf_particles = parse_list(line, k, v)?,
            "pf.resample_threshold" => self.roster.resample_threshold = parse_value(line, k, v)?,
            "pf.noise_particles" => self.roster.noise_pf_particles = parse_list(line, k, v)?,
            "pf.dynamic_particles" => self.roster.dynamic_pf_particles = parse_list(line, k, v)?,
            "scenario.varied_buses" => self.scenario.varied_buses = parse_value(line, k, v)?,
            "scenario.ramp_rate" => self.scenario.ramp_rate = parse_value(line, k, v)?,
            "scenario.ramp_start" => self.scenario.ramp_start = parse_value(line, k, v)?,
            "scenario.fluctuation" => self.scenario.fluctuation = parse_value(line, k, v)?,
            "scenario.horizon" => self.scenario.horizon = parse_value(line, k, v)?,
            "holt.alpha" => self.holt.alpha = parse_value(line, k, v)?,
            "holt.beta" => self.holt.beta = parse_value(line, k, v)?,
            "holt.process_noise" => self.holt.process_noise = parse_value(line, k, v)?,
            "holt.initial_cov" => self.holt.initial_cov = parse_value(line, k, v)?,
            "toy.trials" => self.toy.trials = parse_value(line, k, v)?,
            "toy.truth" => self.toy.truth = parse_value(line, k, v)?,
            "toy.observations" => self.toy.observations = parse_value(line, k, v)?,
            "toy.noise_var" => self.toy.noise_var = parse_value(line, k, v)?,
            "toy.prior_mean" => self.toy.prior_mean = parse_value(line, k, v)?,
            "toy.prior_var" => self.toy.prior_var = parse_value(line, k, v)?,
            "toy.components" => self.toy.components = parse_list(line, k, v)?,
            "toy.iterations" => self.toy.iterations = parse_value(line, k, v)?,
            "toy.gh_order" => self.toy.gh_order = parse_value(line, k, v)?,
            "toy.particles" => self.toy.particles = parse_value(line, k, v)?,
            "complexity.dims" => self.complexity.dims = parse_list(line, k, v)?,
            "complexity.target_r" => self.complexity.target_r = parse_value(line, k, v)?,
            "complexity.components" => self.complexity.components = parse_list(line, k, v)?,
            "complexity.particles" => self.complexity.particles = parse_list(line, k, v)?,
            "complexity.trials" => self.complexity.trials = parse_value(line, k, v)?,
            "complexity.iterations" => self.complexity.iterations = parse_value(line, k, v)?,
            "complexity.repeats" => self.complexity.repeats = parse_value(line, k, v)?,
            "complexity.noise_var" => self.complexity.noise_var = parse_value(line, k, v)?,
            "complexity.prior_mean" => self.complexity.prior_mean = parse_value(line, k, v)?,
            "complexity.prior_var" => self.complexity.prior_var = parse_value(line, k, v)?,
            "complexity.timing" => self.complexity.timing = parse_value(line, k, v)?,
            _ => {
                return Err(HarnessError::Config {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.trials == 0 || self.toy.trials == 0 || self.complexity.trials < 2 {
            return fail("trial counts must be at least 1 (2 for the complexity benchmark)");
        }
        if self.pe_grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("noise.pe_grid entries must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.noise.mix_p) {
            return fail("noise.mix_p must lie in [0, 1]");
        }
        let lists: [&[usize]; 9] = [
            &self.roster.bcf_components,
            &self.roster.pf_particles,
            &self.roster.noise_bcf_components,
            &self.roster.noise_pf_particles,
            &self.roster.dynamic_bcf_components,
            &self.roster.dynamic_pf_particles,
            &self.toy.components,
            &self.complexity.components,
            &self.complexity.particles,
        ];
        if lists.iter().any(|l| l.contains(&0)) {
            return fail("component and particle counts must be positive");
        }
        if self.complexity.dims.contains(&0) || self.complexity.repeats == 0 {
            return fail("complexity dimensions and repeats must be positive");
        }
        if self.roster.bcf_iterations == 0 || self.toy.iterations == 0 || self.complexity.iterations == 0 {
            return fail("iteration counts must be positive");
        }
        if self.scenario.horizon < 3 {
            return fail("scenario.horizon must be at least 3");
        }
        let positive = [
            self.noise.power_std,
            self.noise.voltage_std,
            self.noise.halfwidth_factor,
            self.prior.vm_std,
            self.prior.va_std,
            self.toy.noise_var,
            self.toy.prior_var,
            self.complexity.noise_var,
            self.complexity.prior_var,
            self.complexity.target_r,
            self.nominal_volts,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return fail("standard deviations, variances, target_r and nominal_volts must be positive");
        }
        if !(self.roster.resample_threshold > 0.0 && self.roster.resample_threshold <= 1.0) {
            return fail("pf.resample_threshold must lie in (0, 1]");
        }
        Ok(())
    }

    /// Full-scale trial counts for an experiment.
    pub fn full_scale(mut self, experiment: Experiment) -> Self {
        match experiment {
            Experiment::StaticSweep | Experiment::NoiseSweep => self.trials = 1000,
            Experiment::DynamicSim => self.trials = 500,
            Experiment::Toy => self.toy.trials = 100,
            Experiment::Complexity => self.complexity.trials = 1000,
        }
        self
    }

    /// Serialises every key; `parse(render())` reproduces the configuration.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let case = self.case.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let r = &self.roster;
        let c = &self.complexity;
        let t = &self.toy;
        let lines = [
            ("case", case),
            ("seed", self.seed.to_string()),
            ("trials", self.trials.to_string()),
            ("out", self.out_dir.display().to_string()),
            ("nominal_volts", self.nominal_volts.to_string()),
            ("plan.count", self.plan.count.to_string()),
            ("plan.seed", self.plan.seed.to_string()),
            ("plan.redraw", self.plan.redraw.to_string()),
            ("noise.power_std", self.noise.power_std.to_string()),
            ("noise.voltage_std", self.noise.voltage_std.to_string()),
            ("noise.halfwidth_factor", self.noise.halfwidth_factor.to_string()),
            ("noise.mix_p", self.noise.mix_p.to_string()),
            ("noise.pe_grid", join(&self.pe_grid)),
            ("prior.vm_std", self.prior.vm_std.to_string()),
            ("prior.va_std", self.prior.va_std.to_string()),
            ("bcf.components", join(&r.bcf_components)),
            ("bcf.iterations", r.bcf_iterations.to_string()),
            ("bcf.diagonal", r.bcf_diagonal.to_string()),
            ("bcf.noise_components", join(&r.noise_bcf_components)),
            ("bcf.dynamic_components", join(&r.dynamic_bcf_components)),
            ("pf.particles", join(&r.pf_particles)),
            ("pf.resample_threshold", r.resample_threshold.to_string()),
            ("pf.noise_particles", join(&r.noise_pf_particles)),
            ("pf.dynamic_particles", join(&r.dynamic_pf_particles)),
            ("scenario.varied_buses", self.scenario.varied_buses.to_string()),
            ("scenario.ramp_rate", self.scenario.ramp_rate.to_string()),
            ("scenario.ramp_start", self.scenario.ramp_start.to_string()),
            ("scenario.fluctuation", self.scenario.fluctuation.to_string()),
            ("scenario.horizon", self.scenario.horizon.to_string()),
            ("holt.alpha", self.holt.alpha.to_string()),
            ("holt.beta", self.holt.beta.to_string()),
            ("holt.process_noise", self.holt.process_noise.to_string()),
            ("holt.initial_cov", self.holt.initial_cov.to_string()),
            ("toy.trials", t.trials.to_string()),
            ("toy.truth", t.truth.to_string()),
            ("toy.observations", t.observations.to_string()),
            ("toy.noise_var", t.noise_var.to_string()),
            ("toy.prior_mean", t.prior_mean.to_string()),
            ("toy.prior_var", t.prior_var.to_string()),
            ("toy.components", join(&t.components)),
            ("toy.iterations", t.iterations.to_string()),
            ("toy.gh_order", t.gh_order.to_string()),
            ("toy.particles", t.particles.to_string()),
            ("complexity.dims", join(&c.dims)),
            ("complexity.target_r", c.target_r.to_string()),
            ("complexity.components", join(&c.components)),
            ("complexity.particles", join(&c.particles)),
            ("complexity.trials", c.trials.to_string()),
            ("complexity.iterations", c.iterations.to_string()),
            ("complexity.repeats", c.repeats.to_string()),
            ("complexity.noise_var", c.noise_var.to_string()),
            ("complexity.prior_mean", c.prior_mean.to_string()),
            ("complexity.prior_var", c.prior_var.to_string()),
            ("complexity.timing", c.timing.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
