//! Bayesian state estimation for AC power grids.
//!
//! The crate is organised bottom-up:
//!
//! - [`netmodel`]: case-file parsing (MATPOWER subset and a native CSV layout) into an
//!   immutable [`NetworkModel`] with per-branch π-model admittances.
//! - [`powerflow`]: the nonlinear AC observation model (injections, branch flows, branch
//!   currents), its DC simplification, finite-difference Jacobians and a Newton–Raphson
//!   solver used to produce ground-truth operating points.
//! - [`dynamics`]: Holt's two-parameter smoothing as the prediction model and the
//!   load-trajectory scenario generator.
//! - [`noise`]: Gaussian / Gaussian-uniform convolution measurement noise.
//! - [`quadrature`]: Gauss–Hermite and spherical-radial cubature rules for Gaussian
//!   expectations.
//! - [`filters`]: weighted least squares, EKF, UKF, the belief condensation filter and a
//!   bootstrap particle filter.
//! - [`harness`]: Monte-Carlo experiment drivers, metrics, config and CSV output.

// `!(x > 0.0)` style guards are deliberate: they reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod filters;
pub mod harness;
pub mod netmodel;
pub mod noise;
pub mod powerflow;
pub mod quadrature;
pub mod rng;

pub use dynamics::{HoltParams, HoltState, LoadScenario, LoadTable};
pub use filters::{
    GaussianMixture, LikelihoodContext, MeasurementModel, ParticleEnsemble, PosteriorSummary, PredictedBelief,
};
pub use netmodel::{BranchRecord, BusKind, BusRecord, CaseFormat, NetworkModel};
pub use noise::{ChannelNoiseSpec, NoiseModel};
pub use powerflow::{
    GridObservation, MeasurementEntry, MeasurementKind, MeasurementPlan, MeasurementVector, StateVector,
};
pub use quadrature::{QuadratureKind, QuadratureRule};

pub use nalgebra::{DMatrix, DVector};
