//! State dynamics and load scenarios.
//!
//! The prediction model is Holt's linear (level + trend) smoothing applied coordinate-wise:
//!
//! ```text
//! x⁻_t = a_{t−1} + b_{t−1}
//! a_t  = α x_t + (1 − α) x⁻_t
//! b_t  = β (a_t − a_{t−1}) + (1 − β) b_{t−1}
//! ```
//!
//! Written as an affine map of the previous filtered state, `x⁻_t = F x_{t−1} + g_t` with
//! `F = α(1 + β) I`, which is what the covariance propagation `P⁻ = F P Fᵀ + Q` uses.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::netmodel::NetworkModel;
pub use crate::powerflow::LoadTable;
use crate::powerflow::{solve_power_flow, PowerFlowError, StateVector};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("smoother needs two observed states before predicting")]
    UninitializedSmoother,
    #[error("invalid smoothing parameters: {0}")]
    InvalidParams(String),
    #[error("invalid load scenario: {0}")]
    InvalidScenario(String),
    #[error("state dimension {got} does not match smoother dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("power flow failed at step {step}: {source}")]
    NonConvergence { step: usize, source: PowerFlowError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoltParams {
    pub alpha: f64,
    pub beta: f64,
    pub process_noise_diag: DVector<f64>,
    pub initial_cov_diag: DVector<f64>,
}

impl HoltParams {
    pub fn new(
        alpha: f64,
        beta: f64,
        process_noise_diag: DVector<f64>,
        initial_cov_diag: DVector<f64>,
    ) -> Result<Self, DynamicsError> {
        if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
            return Err(DynamicsError::InvalidParams(format!(
                "alpha={alpha}, beta={beta} must lie in [0, 1]"
            )));
        }
        if process_noise_diag.len() != initial_cov_diag.len() {
            return Err(DynamicsError::InvalidParams("variance vectors differ in length".into()));
        }
        if process_noise_diag
            .iter()
            .chain(initial_cov_diag.iter())
            .any(|&v| !(v >= 0.0))
        {
            return Err(DynamicsError::InvalidParams("variances must be non-negative".into()));
        }
        Ok(Self {
            alpha,
            beta,
            process_noise_diag,
            initial_cov_diag,
        })
    }

    /// Same process and initial variance on every coordinate.
    pub fn isotropic(alpha: f64, beta: f64, d: usize, q: f64, p0: f64) -> Result<Self, DynamicsError> {
        Self::new(alpha, beta, DVector::from_element(d, q), DVector::from_element(d, p0))
    }

    /// `α(1 + β)`, the scalar multiplying the previous filtered state.
    pub fn transition_gain(&self) -> f64 {
        self.alpha * (1.0 + self.beta)
    }

    pub fn process_noise(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.process_noise_diag)
    }

    pub fn initial_cov(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.initial_cov_diag)
    }

    pub fn dim(&self) -> usize {
        self.process_noise_diag.len()
    }
}

/// Level/trend state of the smoother. Built by absorbing two known states; after that every
/// absorbed state is treated as a filtered estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct HoltState {
    level: DVector<f64>,
    trend: DVector<f64>,
    last_level: DVector<f64>,
    last_filtered: DVector<f64>,
    observed: usize,
}

/// One-step forecast: `state = F·x_{t−1} + g` with `F = gain·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct HoltPrediction {
    pub state: DVector<f64>,
    pub gain: f64,
    pub offset: DVector<f64>,
}

impl HoltPrediction {
    /// `F P Fᵀ + Q`.
    pub fn propagate_cov(&self, cov: &DMatrix<f64>, params: &HoltParams) -> DMatrix<f64> {
        cov * (self.gain * self.gain) + params.process_noise()
    }

    /// The affine map applied to an arbitrary previous state.
    pub fn apply(&self, previous: &DVector<f64>) -> DVector<f64> {
        previous * self.gain + &self.offset
    }
}

impl HoltState {
    pub fn new(d: usize) -> Self {
        let z = DVector::zeros(d);
        Self {
            level: z.clone(),
            trend: z.clone(),
            last_level: z.clone(),
            last_filtered: z,
            observed: 0,
        }
    }

    /// Initialised from two consecutive known states.
    pub fn from_pair(x0: &DVector<f64>, x1: &DVector<f64>) -> Self {
        Self {
            level: x1.clone(),
            trend: x1 - x0,
            last_level: x0.clone(),
            last_filtered: x1.clone(),
            observed: 2,
        }
    }

    pub fn level(&self) -> &DVector<f64> {
        &self.level
    }

    pub fn trend(&self) -> &DVector<f64> {
        &self.trend
    }

    pub fn last_level(&self) -> &DVector<f64> {
        &self.last_level
    }

    pub fn is_ready(&self) -> bool {
        self.observed >= 2
    }

    pub fn dim(&self) -> usize {
        self.level.len()
    }
}

pub fn holt_predict(hs: &HoltState, p: &HoltParams) -> Result<HoltPrediction, DynamicsError> {
    if !hs.is_ready() {
        return Err(DynamicsError::UninitializedSmoother);
    }
    let state = &hs.level + &hs.trend;
    let gain = p.transition_gain();
    let offset = &state - &hs.last_filtered * gain;
    Ok(HoltPrediction { state, gain, offset })
}

pub fn holt_absorb(hs: &HoltState, filtered: &DVector<f64>, p: &HoltParams) -> Result<HoltState, DynamicsError> {
    if filtered.len() != hs.dim() {
        return Err(DynamicsError::DimensionMismatch {
            expected: hs.dim(),
            got: filtered.len(),
        });
    }
    match hs.observed {
        0 => Ok(HoltState::primed(hs, filtered, None)),
        1 => Ok(HoltState::primed(hs, filtered, Some(&hs.last_filtered))),
        _ => {
            let predicted = &hs.level + &hs.trend;
            let level = filtered * p.alpha + predicted * (1.0 - p.alpha);
            let trend = (&level - &hs.level) * p.beta + &hs.trend * (1.0 - p.beta);
            Ok(HoltState {
                last_level: hs.level.clone(),
                level,
                trend,
                last_filtered: filtered.clone(),
                observed: hs.observed + 1,
            })
        }
    }
}

impl HoltState {
    fn primed(hs: &HoltState, x: &DVector<f64>, previous: Option<&DVector<f64>>) -> HoltState {
        match previous {
            Some(x0) => HoltState::from_pair(x0, x),
            None => HoltState {
                level: x.clone(),
                trend: DVector::zeros(x.len()),
                last_level: x.clone(),
                last_filtered: x.clone(),
                observed: hs.observed + 1,
            },
        }
    }
}

/// A subset of loads following a linear ramp with multiplicative fluctuation.
///
/// Load of a varied bus at step `k`:
/// `nominal · (1 + s·rate·max(0, k − ramp_start)) · (1 + fluctuation·ε_k)` with `s = ±1`
/// drawn per bus and `ε_k ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadScenario {
    varied_buses: Vec<u32>,
    directions: Vec<f64>,
    pub ramp_rate: f64,
    pub ramp_start: usize,
    pub fluctuation: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl LoadScenario {
    /// Ramp directions are drawn from `seed`.
    pub fn new(
        varied_buses: Vec<u32>,
        ramp_rate: f64,
        fluctuation: f64,
        horizon: usize,
        seed: u64,
    ) -> Result<Self, DynamicsError> {
        let mut r = rng::stream(seed, &[rng::tag("ramp-direction")]);
        let directions = varied_buses
            .iter()
            .map(|_| if rand::Rng::random_bool(&mut r, 0.5) { 1.0 } else { -1.0 })
            .collect();
        Self::with_directions(varied_buses, directions, ramp_rate, fluctuation, horizon, seed)
    }

    pub fn with_directions(
        varied_buses: Vec<u32>,
        directions: Vec<f64>,
        ramp_rate: f64,
        fluctuation: f64,
        horizon: usize,
        seed: u64,
    ) -> Result<Self, DynamicsError> {
        if varied_buses.is_empty() {
            return Err(DynamicsError::InvalidScenario("no varied buses".into()));
        }
        if directions.len() != varied_buses.len() {
            return Err(DynamicsError::InvalidScenario("one direction per varied bus".into()));
        }
        if horizon < 2 {
            return Err(DynamicsError::InvalidScenario("horizon must be at least 2".into()));
        }
        if !(fluctuation >= 0.0) {
            return Err(DynamicsError::InvalidScenario(
                "fluctuation must be non-negative".into(),
            ));
        }
        Ok(Self {
            varied_buses,
            directions,
            ramp_rate,
            ramp_start: 10,
            fluctuation,
            horizon,
            seed,
        })
    }

    /// `count` distinct load-carrying buses chosen by `seed`, with ±10%/step ramps, 3%
    /// fluctuation and a 50-step horizon.
    pub fn random(model: &NetworkModel, count: usize, seed: u64) -> Result<Self, DynamicsError> {
        let candidates: Vec<u32> = model
            .buses()
            .iter()
            .filter(|b| b.load_p != 0.0 || b.load_q != 0.0)
            .map(|b| b.id)
            .collect();
        if count == 0 || count > candidates.len() {
            return Err(DynamicsError::InvalidScenario(format!(
                "cannot vary {count} of {} load buses",
                candidates.len()
            )));
        }
        let mut r = rng::stream(seed, &[rng::tag("varied-buses")]);
        let mut chosen: Vec<u32> = sample(&mut r, candidates.len(), count)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        chosen.sort_unstable();
        Self::new(chosen, 0.1, 0.03, 50, seed)
    }

    pub fn with_ramp_start(mut self, ramp_start: usize) -> Self {
        self.ramp_start = ramp_start;
        self
    }

    pub fn varied_buses(&self) -> &[u32] {
        &self.varied_buses
    }

    pub fn directions(&self) -> &[f64] {
        &self.directions
    }
}

pub fn generate_load_trajectory(
    model: &NetworkModel,
    scenario: &LoadScenario,
) -> Result<Vec<LoadTable>, DynamicsError> {
    let positions = scenario
        .varied_buses
        .iter()
        .map(|&id| {
            model
                .bus_index(id)
                .ok_or_else(|| DynamicsError::InvalidScenario(format!("unknown bus {id}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let nominal = LoadTable::nominal(model);
    let mut r = rng::stream(scenario.seed, &[rng::tag("load-fluctuation")]);
    Ok((0..scenario.horizon)
        .map(|k| {
            let ramp = k.saturating_sub(scenario.ramp_start) as f64 * scenario.ramp_rate;
            let mut table = nominal.clone();
            for (&i, &dir) in positions.iter().zip(&scenario.directions) {
                let eps: f64 = StandardNormal.sample(&mut r);
                let factor = (1.0 + dir * ramp) * (1.0 + scenario.fluctuation * eps);
                table.p[i] = nominal.p[i] * factor;
                table.q[i] = nominal.q[i] * factor;
            }
            table
        })
        .collect())
}

pub fn ground_truth_states(model: &NetworkModel, trajectory: &[LoadTable]) -> Result<Vec<StateVector>, DynamicsError> {
    trajectory
        .iter()
        .enumerate()
        .map(|(step, loads)| {
            solve_power_flow(model, loads, 1e-10, 20).map_err(|source| DynamicsError::NonConvergence { step, source })
        })
        .collect()
}
