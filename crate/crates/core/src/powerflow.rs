//! AC observation model, its DC simplification, finite-difference Jacobians and a
//! Newton–Raphson solver.
//!
//! The state holds `|V|` and `θ` of every non-slack bus (magnitudes first, then angles, both
//! in bus order). The slack voltage is taken from the case data.
//!
//! Sign conventions are the standard ones: power leaving bus `i` into branch `(i, j)` is
//! `S_ij = V_i · conj(I_ij)` with `I_ij = y_s (V_i − V_j) + y_sh,i V_i`, and the injection at
//! a bus is the sum of the flows leaving it plus its own shunt consumption.

use std::collections::HashSet;

use nalgebra::{Complex, DMatrix, DVector};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::filters::MeasurementModel;
use crate::netmodel::{branch_admittance, BranchAdmittance, BusKind, CaseError, NetworkModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("unknown bus {0}")]
    UnknownBus(u32),
    #[error("unknown branch index {0}")]
    UnknownBranch(u32),
    #[error("state has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate measurement entry {0:?}")]
    DuplicateEntry(MeasurementEntry),
    #[error("newton-raphson did not converge after {iterations} iterations (mismatch {mismatch:e})")]
    NonConvergence { iterations: usize, mismatch: f64 },
    #[error("power-flow jacobian is singular")]
    SingularJacobian,
    #[error("finite-difference step must be positive")]
    InvalidStep,
    #[error(transparent)]
    Case(#[from] CaseError),
}

/// Voltage magnitudes and angles of the non-slack buses, packed as `[vm..., va...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(DVector<f64>);

impl StateVector {
    pub fn from_parts(vm: &[f64], va: &[f64]) -> Self {
        assert_eq!(vm.len(), va.len(), "vm and va must have equal length");
        Self(DVector::from_iterator(vm.len() * 2, vm.iter().chain(va).copied()))
    }

    pub fn from_vector(v: DVector<f64>) -> Self {
        assert!(v.len().is_multiple_of(2), "state dimension must be even");
        Self(v)
    }

    /// All non-slack buses at `|V| = 1`, `θ = 0`.
    pub fn flat(model: &NetworkModel) -> Self {
        let n = model.bus_count() - 1;
        Self::from_parts(&vec![1.0; n], &vec![0.0; n])
    }

    /// The voltages stored in the case file.
    pub fn from_case(model: &NetworkModel) -> Self {
        let idx = model.non_slack_indices();
        let b = model.buses();
        let vm: Vec<f64> = idx.iter().map(|&i| b[i].vm).collect();
        let va: Vec<f64> = idx.iter().map(|&i| b[i].va).collect();
        Self::from_parts(&vm, &va)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn vm(&self) -> &[f64] {
        &self.0.as_slice()[..self.0.len() / 2]
    }

    pub fn va(&self) -> &[f64] {
        &self.0.as_slice()[self.0.len() / 2..]
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

impl From<DVector<f64>> for StateVector {
    fn from(v: DVector<f64>) -> Self {
        Self::from_vector(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MeasurementKind {
    VoltageMagnitude,
    RealInjection,
    ReactiveInjection,
    RealFlow,
    ReactiveFlow,
    CurrentRe,
    CurrentIm,
    /// Linearised real injection of the DC model.
    DcRealInjection,
}

impl MeasurementKind {
    pub fn is_branch(self) -> bool {
        matches!(
            self,
            MeasurementKind::RealFlow
                | MeasurementKind::ReactiveFlow
                | MeasurementKind::CurrentRe
                | MeasurementKind::CurrentIm
        )
    }

    pub fn is_voltage(self) -> bool {
        self == MeasurementKind::VoltageMagnitude
    }
}

/// One measured quantity. `location` is a bus id for bus quantities and a branch index
/// (position in [`NetworkModel::branches`]) for flows and currents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MeasurementEntry {
    pub kind: MeasurementKind,
    pub location: u32,
}

impl MeasurementEntry {
    pub fn new(kind: MeasurementKind, location: u32) -> Self {
        Self { kind, location }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementPlan {
    entries: Vec<MeasurementEntry>,
}

impl MeasurementPlan {
    pub fn new(model: &NetworkModel, entries: Vec<MeasurementEntry>) -> Result<Self, PowerFlowError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.kind.is_branch() {
                if e.location as usize >= model.branches().len() {
                    return Err(PowerFlowError::UnknownBranch(e.location));
                }
            } else if model.bus_index(e.location).is_none() {
                return Err(PowerFlowError::UnknownBus(e.location));
            }
            if !seen.insert(*e) {
                return Err(PowerFlowError::DuplicateEntry(*e));
            }
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    /// Every bus voltage magnitude followed by every real injection (28 channels on IEEE-14).
    pub fn voltages_and_injections(model: &NetworkModel) -> Self {
        let ids = model.buses().iter().map(|b| b.id);
        let entries = ids
            .clone()
            .map(|id| MeasurementEntry::new(MeasurementKind::VoltageMagnitude, id))
            .chain(ids.map(|id| MeasurementEntry::new(MeasurementKind::RealInjection, id)))
            .collect();
        Self { entries }
    }

    /// `count` channels drawn at random from the candidate pool, in a fixed priority order:
    /// voltage magnitudes and real injections first, then reactive injections, then branch
    /// real/reactive flows. Within each tier the choice and order are seeded.
    pub fn random(model: &NetworkModel, count: usize, seed: u64) -> Self {
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag("plan")]);
        let ids: Vec<u32> = model.buses().iter().map(|b| b.id).collect();
        let nbr = model.branches().len() as u32;
        let tiers: [Vec<MeasurementEntry>; 3] = [
            ids.iter()
                .map(|&i| MeasurementEntry::new(MeasurementKind::VoltageMagnitude, i))
                .chain(
                    ids.iter()
                        .map(|&i| MeasurementEntry::new(MeasurementKind::RealInjection, i)),
                )
                .collect(),
            ids.iter()
                .map(|&i| MeasurementEntry::new(MeasurementKind::ReactiveInjection, i))
                .collect(),
            (0..nbr)
                .map(|k| MeasurementEntry::new(MeasurementKind::RealFlow, k))
                .chain((0..nbr).map(|k| MeasurementEntry::new(MeasurementKind::ReactiveFlow, k)))
                .collect(),
        ];
        let mut entries = Vec::with_capacity(count);
        for mut tier in tiers {
            if entries.len() >= count {
                break;
            }
            tier.shuffle(&mut rng);
            let take = (count - entries.len()).min(tier.len());
            let mut chosen = tier[..take].to_vec();
            chosen.sort();
            entries.extend(chosen);
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[MeasurementEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Measured (or evaluated) values aligned with a [`MeasurementPlan`].
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector(pub DVector<f64>);

impl MeasurementVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

fn check_dim(model: &NetworkModel, state: &StateVector) -> Result<(), PowerFlowError> {
    if state.dim() != model.state_dim() {
        return Err(PowerFlowError::DimensionMismatch {
            expected: model.state_dim(),
            got: state.dim(),
        });
    }
    Ok(())
}

/// Polar voltages `(|V|, θ)` of every bus in bus order, slack taken from the case.
pub fn bus_voltages(model: &NetworkModel, state: &StateVector) -> Result<Vec<(f64, f64)>, PowerFlowError> {
    check_dim(model, state)?;
    let slack = model.slack_index();
    let (vm, va) = (state.vm(), state.va());
    Ok((0..model.bus_count())
        .map(|i| match i.cmp(&slack) {
            std::cmp::Ordering::Equal => (model.buses()[i].vm, model.buses()[i].va),
            std::cmp::Ordering::Less => (vm[i], va[i]),
            std::cmp::Ordering::Greater => (vm[i - 1], va[i - 1]),
        })
        .collect())
}

fn branch_ends(model: &NetworkModel, branch: u32) -> Result<(usize, usize, BranchAdmittance), PowerFlowError> {
    let br = model
        .branches()
        .get(branch as usize)
        .ok_or(PowerFlowError::UnknownBranch(branch))?;
    let i = model
        .bus_index(br.from_bus)
        .ok_or(PowerFlowError::UnknownBus(br.from_bus))?;
    let j = model
        .bus_index(br.to_bus)
        .ok_or(PowerFlowError::UnknownBus(br.to_bus))?;
    Ok((i, j, branch_admittance(br)?))
}

/// `(P, Q)` leaving bus `i` into a branch towards bus `j`, where `(g, b)` is the series
/// admittance and `(g0, b0)` the shunt at bus `i`'s end.
fn end_flow(vi: (f64, f64), vj: (f64, f64), g: f64, b: f64, g0: f64, b0: f64) -> (f64, f64) {
    let (mi, ti) = vi;
    let (mj, tj) = vj;
    let (s, c) = (ti - tj).sin_cos();
    let mm = mi * mj;
    let p = mi * mi * (g + g0) - mm * (g * c + b * s);
    let q = -mi * mi * (b + b0) - mm * (g * s - b * c);
    (p, q)
}

/// Real and reactive power injected at bus `bus_id`.
pub fn injected_power(model: &NetworkModel, state: &StateVector, bus_id: u32) -> Result<(f64, f64), PowerFlowError> {
    let n = model.bus_index(bus_id).ok_or(PowerFlowError::UnknownBus(bus_id))?;
    let v = bus_voltages(model, state)?;
    injection_at(model, &v, n)
}

fn injection_at(model: &NetworkModel, v: &[(f64, f64)], n: usize) -> Result<(f64, f64), PowerFlowError> {
    let bus = &model.buses()[n];
    let vm2 = v[n].0 * v[n].0;
    let (mut p, mut q) = (vm2 * bus.shunt_g, -vm2 * bus.shunt_b);
    for &k in model.incident(n) {
        let (i, j, a) = branch_ends(model, k as u32)?;
        let (dp, dq) = if i == n {
            end_flow(v[i], v[j], a.series_g, a.series_b, a.from_shunt_g, a.from_shunt_b)
        } else {
            end_flow(v[j], v[i], a.series_g, a.series_b, a.to_shunt_g, a.to_shunt_b)
        };
        p += dp;
        q += dq;
    }
    Ok((p, q))
}

/// `(P_ij, Q_ij)` measured at the `from` end of branch `branch`.
pub fn branch_flow(model: &NetworkModel, state: &StateVector, branch: u32) -> Result<(f64, f64), PowerFlowError> {
    let (i, j, a) = branch_ends(model, branch)?;
    let v = bus_voltages(model, state)?;
    Ok(end_flow(
        v[i],
        v[j],
        a.series_g,
        a.series_b,
        a.from_shunt_g,
        a.from_shunt_b,
    ))
}

/// `(P_ji, Q_ji)` measured at the `to` end of branch `branch`.
pub fn branch_flow_reverse(
    model: &NetworkModel,
    state: &StateVector,
    branch: u32,
) -> Result<(f64, f64), PowerFlowError> {
    let (i, j, a) = branch_ends(model, branch)?;
    let v = bus_voltages(model, state)?;
    Ok(end_flow(v[j], v[i], a.series_g, a.series_b, a.to_shunt_g, a.to_shunt_b))
}

/// π-model current leaving the `from` end: `y_s (V_i − V_j) + y_sh,i V_i`.
pub fn pi_model_current(adm: &BranchAdmittance, vi: Complex<f64>, vj: Complex<f64>) -> Complex<f64> {
    adm.series() * (vi - vj) + adm.from_shunt() * vi
}

/// Real and imaginary part of the current at the `from` end of branch `branch`.
pub fn branch_current(model: &NetworkModel, state: &StateVector, branch: u32) -> Result<(f64, f64), PowerFlowError> {
    let (i, j, a) = branch_ends(model, branch)?;
    let v = bus_voltages(model, state)?;
    let c = pi_model_current(
        &a,
        Complex::from_polar(v[i].0, v[i].1),
        Complex::from_polar(v[j].0, v[j].1),
    );
    Ok((c.re, c.im))
}

/// DC-model real injection `Σ_i B_ni (θ_n − θ_i)` with `B_ni` the off-diagonal Y-bus
/// susceptance (`1/x` for a lossless line).
pub fn dc_injected_power(model: &NetworkModel, state: &StateVector, bus_id: u32) -> Result<f64, PowerFlowError> {
    let n = model.bus_index(bus_id).ok_or(PowerFlowError::UnknownBus(bus_id))?;
    let v = bus_voltages(model, state)?;
    dc_at(model, &v, n)
}

fn dc_at(model: &NetworkModel, v: &[(f64, f64)], n: usize) -> Result<f64, PowerFlowError> {
    let mut p = 0.0;
    for &k in model.incident(n) {
        let (i, j, a) = branch_ends(model, k as u32)?;
        let other = if i == n { j } else { i };
        p += -a.series_b * (v[n].1 - v[other].1);
    }
    Ok(p)
}

/// Noiseless forward evaluation of every plan entry through the per-entry operations.
pub fn evaluate_measurements(
    model: &NetworkModel,
    state: &StateVector,
    plan: &MeasurementPlan,
) -> Result<MeasurementVector, PowerFlowError> {
    let v = bus_voltages(model, state)?;
    let mut out = DVector::zeros(plan.len());
    for (k, e) in plan.entries().iter().enumerate() {
        out[k] = match e.kind {
            MeasurementKind::VoltageMagnitude => {
                let n = model
                    .bus_index(e.location)
                    .ok_or(PowerFlowError::UnknownBus(e.location))?;
                v[n].0
            }
            MeasurementKind::RealInjection => injected_power(model, state, e.location)?.0,
            MeasurementKind::ReactiveInjection => injected_power(model, state, e.location)?.1,
            MeasurementKind::RealFlow => branch_flow(model, state, e.location)?.0,
            MeasurementKind::ReactiveFlow => branch_flow(model, state, e.location)?.1,
            MeasurementKind::CurrentRe => branch_current(model, state, e.location)?.0,
            MeasurementKind::CurrentIm => branch_current(model, state, e.location)?.1,
            MeasurementKind::DcRealInjection => dc_injected_power(model, state, e.location)?,
        };
    }
    Ok(MeasurementVector(out))
}

/// Central finite-difference Jacobian `∂h_k/∂x_l` of [`evaluate_measurements`].
pub fn numerical_jacobian(
    model: &NetworkModel,
    state: &StateVector,
    plan: &MeasurementPlan,
    step: f64,
) -> Result<DMatrix<f64>, PowerFlowError> {
    if !(step > 0.0) {
        return Err(PowerFlowError::InvalidStep);
    }
    check_dim(model, state)?;
    let d = state.dim();
    let mut jac = DMatrix::zeros(plan.len(), d);
    for l in 0..d {
        let mut plus = state.as_vector().clone();
        let mut minus = plus.clone();
        plus[l] += step;
        minus[l] -= step;
        let hp = evaluate_measurements(model, &StateVector(plus), plan)?;
        let hm = evaluate_measurements(model, &StateVector(minus), plan)?;
        jac.set_column(l, &((hp.0 - hm.0) / (2.0 * step)));
    }
    Ok(jac)
}

/// Per-bus demand in bus order, per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadTable {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl LoadTable {
    pub fn nominal(model: &NetworkModel) -> Self {
        Self {
            p: model.buses().iter().map(|b| b.load_p).collect(),
            q: model.buses().iter().map(|b| b.load_q).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            p: self.p.iter().map(|x| x * factor).collect(),
            q: self.q.iter().map(|x| x * factor).collect(),
        }
    }
}

/// Dense complex bus admittance matrix including bus shunts.
pub fn admittance_matrix(model: &NetworkModel) -> Result<DMatrix<Complex<f64>>, PowerFlowError> {
    let n = model.bus_count();
    let mut y = DMatrix::from_element(n, n, Complex::new(0.0, 0.0));
    for (i, b) in model.buses().iter().enumerate() {
        y[(i, i)] += Complex::new(b.shunt_g, b.shunt_b);
    }
    for k in 0..model.branches().len() {
        let (i, j, a) = branch_ends(model, k as u32)?;
        let ys = a.series();
        y[(i, i)] += ys + a.from_shunt();
        y[(j, j)] += ys + a.to_shunt();
        y[(i, j)] -= ys;
        y[(j, i)] -= ys;
    }
    Ok(y)
}

/// Newton–Raphson power flow from a flat start (PV/slack buses at their set-points).
///
/// Unknowns are the angles of PV and PQ buses and the magnitudes of PQ buses. Scheduled
/// injection is `gen_p − load` for real power and `−load` for reactive power at PQ buses.
pub fn solve_power_flow(
    model: &NetworkModel,
    loads: &LoadTable,
    tol: f64,
    max_iter: usize,
) -> Result<StateVector, PowerFlowError> {
    let n = model.bus_count();
    let buses = model.buses();
    let ybus = admittance_matrix(model)?;
    let pvpq: Vec<usize> = (0..n).filter(|&i| buses[i].kind != BusKind::Slack).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| buses[i].kind == BusKind::Pq).collect();
    let p_spec: Vec<f64> = (0..n).map(|i| buses[i].gen_p - loads.p[i]).collect();
    let q_spec: Vec<f64> = (0..n).map(|i| -loads.q[i]).collect();

    let mut vm: Vec<f64> = buses
        .iter()
        .map(|b| if b.kind == BusKind::Pq { 1.0 } else { b.vm })
        .collect();
    let mut va: Vec<f64> = buses
        .iter()
        .map(|b| if b.kind == BusKind::Slack { b.va } else { 0.0 })
        .collect();
    let (npv, npq) = (pvpq.len(), pq.len());

    let mut last_mismatch = f64::INFINITY;
    for iter in 0..=max_iter {
        let v = DVector::from_iterator(n, (0..n).map(|i| Complex::from_polar(vm[i], va[i])));
        let ibus = &ybus * &v;
        let s: Vec<Complex<f64>> = (0..n).map(|i| v[i] * ibus[i].conj()).collect();
        let mut f = DVector::zeros(npv + npq);
        for (r, &i) in pvpq.iter().enumerate() {
            f[r] = s[i].re - p_spec[i];
        }
        for (r, &i) in pq.iter().enumerate() {
            f[npv + r] = s[i].im - q_spec[i];
        }
        let mismatch = f.amax();
        if !mismatch.is_finite() {
            return Err(PowerFlowError::NonConvergence {
                iterations: iter,
                mismatch,
            });
        }
        last_mismatch = mismatch;
        if mismatch < tol {
            let slack = model.slack_index();
            let keep = |x: &[f64]| -> Vec<f64> {
                x.iter()
                    .enumerate()
                    .filter(|(i, _)| *i != slack)
                    .map(|(_, v)| *v)
                    .collect()
            };
            return Ok(StateVector::from_parts(&keep(&vm), &keep(&va)));
        }
        if iter == max_iter {
            break;
        }

        // dS/dVa = j diag(V) conj(diag(I) − Y diag(V)),
        // dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|).
        let vnorm: Vec<Complex<f64>> = (0..n).map(|i| v[i] / vm[i]).collect();
        let j_unit = Complex::new(0.0, 1.0);
        let ds_dva = |r: usize, c: usize| {
            let inner = if r == c { ibus[r] } else { Complex::new(0.0, 0.0) } - ybus[(r, c)] * v[c];
            j_unit * v[r] * inner.conj()
        };
        let ds_dvm = |r: usize, c: usize| {
            let mut t = v[r] * (ybus[(r, c)] * vnorm[c]).conj();
            if r == c {
                t += ibus[r].conj() * vnorm[r];
            }
            t
        };
        let dim = npv + npq;
        let mut jac = DMatrix::zeros(dim, dim);
        for (r, &i) in pvpq.iter().enumerate() {
            for (c, &k) in pvpq.iter().enumerate() {
                jac[(r, c)] = ds_dva(i, k).re;
            }
            for (c, &k) in pq.iter().enumerate() {
                jac[(r, npv + c)] = ds_dvm(i, k).re;
            }
        }
        for (r, &i) in pq.iter().enumerate() {
            for (c, &k) in pvpq.iter().enumerate() {
                jac[(npv + r, c)] = ds_dva(i, k).im;
            }
            for (c, &k) in pq.iter().enumerate() {
                jac[(npv + r, npv + c)] = ds_dvm(i, k).im;
            }
        }
        let dx = jac.lu().solve(&(-f)).ok_or(PowerFlowError::SingularJacobian)?;
        for (r, &i) in pvpq.iter().enumerate() {
            va[i] += dx[r];
        }
        for (r, &i) in pq.iter().enumerate() {
            vm[i] += dx[npv + r];
        }
    }
    Err(PowerFlowError::NonConvergence {
        iterations: max_iter,
        mismatch: last_mismatch,
    })
}

#[derive(Debug, Clone, Copy)]
enum Channel {
    Vm(usize),
    P(usize),
    Q(usize),
    FlowP(usize),
    FlowQ(usize),
    CurRe(usize),
    CurIm(usize),
    Dc(usize),
}

#[derive(Debug, Clone)]
struct CompiledBranch {
    from: usize,
    to: usize,
    adm: BranchAdmittance,
}

/// Precompiled observation function `h(x)` for a fixed model and plan.
///
/// Produces the same values as [`evaluate_measurements`] without per-call lookups, and is
/// the [`MeasurementModel`] the filters consume.
#[derive(Debug, Clone)]
pub struct GridObservation {
    slack: usize,
    slack_v: (f64, f64),
    shunts: Vec<(f64, f64)>,
    incident: Vec<Vec<usize>>,
    branches: Vec<CompiledBranch>,
    channels: Vec<Channel>,
}

impl GridObservation {
    pub fn new(model: &NetworkModel, plan: &MeasurementPlan) -> Result<Self, PowerFlowError> {
        let slack = model.slack_index();
        let branches = (0..model.branches().len())
            .map(|k| branch_ends(model, k as u32).map(|(from, to, adm)| CompiledBranch { from, to, adm }))
            .collect::<Result<Vec<_>, _>>()?;
        let bus = |id: u32| model.bus_index(id).ok_or(PowerFlowError::UnknownBus(id));
        let branch = |k: u32| {
            if (k as usize) < model.branches().len() {
                Ok(k as usize)
            } else {
                Err(PowerFlowError::UnknownBranch(k))
            }
        };
        let channels = plan
            .entries()
            .iter()
            .map(|e| {
                Ok(match e.kind {
                    MeasurementKind::VoltageMagnitude => Channel::Vm(bus(e.location)?),
                    MeasurementKind::RealInjection => Channel::P(bus(e.location)?),
                    MeasurementKind::ReactiveInjection => Channel::Q(bus(e.location)?),
                    MeasurementKind::RealFlow => Channel::FlowP(branch(e.location)?),
                    MeasurementKind::ReactiveFlow => Channel::FlowQ(branch(e.location)?),
                    MeasurementKind::CurrentRe => Channel::CurRe(branch(e.location)?),
                    MeasurementKind::CurrentIm => Channel::CurIm(branch(e.location)?),
                    MeasurementKind::DcRealInjection => Channel::Dc(bus(e.location)?),
                })
            })
            .collect::<Result<Vec<_>, PowerFlowError>>()?;
        Ok(Self {
            slack,
            slack_v: (model.buses()[slack].vm, model.buses()[slack].va),
            shunts: model.buses().iter().map(|b| (b.shunt_g, b.shunt_b)).collect(),
            incident: (0..model.bus_count()).map(|i| model.incident(i).to_vec()).collect(),
            branches,
            channels,
        })
    }

    fn voltages(&self, x: &DVector<f64>) -> Vec<(f64, f64)> {
        let half = x.len() / 2;
        (0..self.shunts.len())
            .map(|i| match i.cmp(&self.slack) {
                std::cmp::Ordering::Equal => self.slack_v,
                std::cmp::Ordering::Less => (x[i], x[half + i]),
                std::cmp::Ordering::Greater => (x[i - 1], x[half + i - 1]),
            })
            .collect()
    }

    fn injection(&self, v: &[(f64, f64)], n: usize) -> (f64, f64) {
        let vm2 = v[n].0 * v[n].0;
        let (gs, bs) = self.shunts[n];
        let (mut p, mut q) = (vm2 * gs, -vm2 * bs);
        for &k in &self.incident[n] {
            let b = &self.branches[k];
            let a = &b.adm;
            let (dp, dq) = if b.from == n {
                end_flow(
                    v[b.from],
                    v[b.to],
                    a.series_g,
                    a.series_b,
                    a.from_shunt_g,
                    a.from_shunt_b,
                )
            } else {
                end_flow(v[b.to], v[b.from], a.series_g, a.series_b, a.to_shunt_g, a.to_shunt_b)
            };
            p += dp;
            q += dq;
        }
        (p, q)
    }

    fn flow(&self, v: &[(f64, f64)], k: usize) -> (f64, f64) {
        let b = &self.branches[k];
        let a = &b.adm;
        end_flow(
            v[b.from],
            v[b.to],
            a.series_g,
            a.series_b,
            a.from_shunt_g,
            a.from_shunt_b,
        )
    }

    fn current(&self, v: &[(f64, f64)], k: usize) -> Complex<f64> {
        let b = &self.branches[k];
        pi_model_current(
            &b.adm,
            Complex::from_polar(v[b.from].0, v[b.from].1),
            Complex::from_polar(v[b.to].0, v[b.to].1),
        )
    }

    fn dc(&self, v: &[(f64, f64)], n: usize) -> f64 {
        self.incident[n]
            .iter()
            .map(|&k| {
                let b = &self.branches[k];
                let other = if b.from == n { b.to } else { b.from };
                -b.adm.series_b * (v[n].1 - v[other].1)
            })
            .sum()
    }
}

impl MeasurementModel for GridObservation {
    fn state_dim(&self) -> usize {
        2 * (self.shunts.len() - 1)
    }

    fn measurement_dim(&self) -> usize {
        self.channels.len()
    }

    fn evaluate(&self, x: &DVector<f64>) -> DVector<f64> {
        let v = self.voltages(x);
        DVector::from_iterator(
            self.channels.len(),
            self.channels.iter().map(|c| match *c {
                Channel::Vm(n) => v[n].0,
                Channel::P(n) => self.injection(&v, n).0,
                Channel::Q(n) => self.injection(&v, n).1,
                Channel::FlowP(k) => self.flow(&v, k).0,
                Channel::FlowQ(k) => self.flow(&v, k).1,
                Channel::CurRe(k) => self.current(&v, k).re,
                Channel::CurIm(k) => self.current(&v, k).im,
                Channel::Dc(n) => self.dc(&v, n),
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{ieee14, ieee14_published_solution, BranchRecord, BusRecord};
    use proptest::prelude::*;

    fn two_bus(slack_vm: f64, r: f64, x: f64, charging: f64) -> NetworkModel {
        let mut b1 = BusRecord::new(1, BusKind::Slack);
        b1.vm = slack_vm;
        NetworkModel::new(
            vec![b1, BusRecord::new(2, BusKind::Pq)],
            vec![BranchRecord::line(1, 2, r, x, charging)],
            100.0,
        )
        .unwrap()
    }

    fn ieee14_solved() -> StateVector {
        let m = ieee14();
        let sol = ieee14_published_solution();
        let vm: Vec<f64> = sol[1..].iter().map(|s| s.1).collect();
        let va: Vec<f64> = sol[1..].iter().map(|s| s.2).collect();
        assert_eq!(m.buses()[0].id, 1);
        StateVector::from_parts(&vm, &va)
    }

    #[test]
    fn flat_start_injection_is_shunt_only() {
        let m = two_bus(1.0, 0.01, 0.1, 0.2);
        let s = StateVector::flat(&m);
        // Series terms cancel at equal voltages; only the line-charging shunts remain.
        let (p, q) = injected_power(&m, &s, 1).unwrap();
        assert!(p.abs() < 1e-15);
        assert!((q + 0.1).abs() < 1e-12);
    }

    #[test]
    fn two_bus_injection_by_hand() {
        let m = two_bus(1.0, 0.0, 0.1, 0.0);
        let s = StateVector::from_parts(&[1.0], &[-0.1]);
        let (p1, _) = injected_power(&m, &s, 1).unwrap();
        // P_1 = −|V1||V2| b sin(θ1 − θ2) with b = −10.
        assert!((p1 - 10.0 * 0.1f64.sin()).abs() < 1e-12);
        let (p12, _) = branch_flow(&m, &s, 0).unwrap();
        let (p21, _) = branch_flow_reverse(&m, &s, 0).unwrap();
        assert!((p12 - p1).abs() < 1e-15);
        assert!((p12 + p21).abs() < 1e-12);
    }

    #[test]
    fn branch_flow_examples() {
        let m = two_bus(1.0, 0.02, 0.1, 0.0);
        let s = StateVector::flat(&m);
        assert!(branch_flow(&m, &s, 0).unwrap().0.abs() < 1e-15);
        let adm = BranchAdmittance {
            from_shunt_g: 0.05,
            ..branch_admittance(&m.branches()[0]).unwrap()
        };
        let (p, _) = end_flow(
            (1.0, 0.3),
            (1.0, 0.3),
            adm.series_g,
            adm.series_b,
            adm.from_shunt_g,
            0.0,
        );
        assert!((p - 0.05).abs() < 1e-15);
        assert!(matches!(branch_flow(&m, &s, 5), Err(PowerFlowError::UnknownBranch(5))));
        assert!(matches!(injected_power(&m, &s, 9), Err(PowerFlowError::UnknownBus(9))));
    }

    #[test]
    fn current_examples() {
        let m = two_bus(1.0, 0.0, 0.1, 0.0);
        let s = StateVector::flat(&m);
        let (re, im) = branch_current(&m, &s, 0).unwrap();
        assert_eq!((re, im), (0.0, 0.0));
        let adm = branch_admittance(&m.branches()[0]).unwrap();
        let c = pi_model_current(&adm, Complex::new(1.0, 0.0), Complex::new(0.0, 0.0));
        assert!(c.re.abs() < 1e-15);
        assert!((c.im + 10.0).abs() < 1e-12);
    }

    #[test]
    fn dc_examples() {
        let m = ieee14();
        let s = StateVector::from_parts(&[1.0; 13], &[0.3; 13]);
        let slack_at_same = StateVector::from_parts(&[1.0; 13], &[0.0; 13]);
        assert!(dc_injected_power(&m, &slack_at_same, 4).unwrap().abs() < 1e-15);
        let base: Vec<f64> = (0..13).map(|k| 0.001 * (k as f64 - 6.0)).collect();
        let doubled: Vec<f64> = base.iter().map(|x| 2.0 * x).collect();
        for id in [1, 4, 9] {
            let a = dc_injected_power(&m, &StateVector::from_parts(&[1.0; 13], &base), id).unwrap();
            let b = dc_injected_power(&m, &StateVector::from_parts(&[1.0; 13], &doubled), id).unwrap();
            assert!((b - 2.0 * a).abs() < 1e-12);
        }
        assert!(dc_injected_power(&m, &s, 2).unwrap().is_finite());
    }

    #[test]
    fn dc_matches_ac_for_small_angles_on_lossless_lines() {
        let mut b1 = BusRecord::new(1, BusKind::Slack);
        b1.vm = 1.0;
        let m = NetworkModel::new(
            vec![b1, BusRecord::new(2, BusKind::Pq), BusRecord::new(3, BusKind::Pq)],
            vec![
                BranchRecord::line(1, 2, 0.0, 0.1, 0.0),
                BranchRecord::line(2, 3, 0.0, 0.2, 0.0),
                BranchRecord::line(1, 3, 0.0, 0.25, 0.0),
            ],
            100.0,
        )
        .unwrap();
        let s = StateVector::from_parts(&[1.0, 1.0], &[-0.008, 0.006]);
        for id in 1..=3 {
            let ac = injected_power(&m, &s, id).unwrap().0;
            let dc = dc_injected_power(&m, &s, id).unwrap();
            assert!((ac - dc).abs() < 1e-3, "bus {id}: ac {ac} dc {dc}");
        }
    }

    #[test]
    fn evaluate_examples() {
        let m = ieee14();
        let s = ieee14_solved();
        let ids: Vec<u32> = (2..=14).collect();
        let plan = MeasurementPlan::new(
            &m,
            ids.iter()
                .map(|&i| MeasurementEntry::new(MeasurementKind::VoltageMagnitude, i))
                .collect(),
        )
        .unwrap();
        let h = evaluate_measurements(&m, &s, &plan).unwrap();
        assert_eq!(h.0.as_slice(), s.vm());
        let empty = evaluate_measurements(&m, &s, &MeasurementPlan::empty()).unwrap();
        assert!(empty.is_empty());

        let plan = MeasurementPlan::voltages_and_injections(&m);
        assert_eq!(plan.len(), 28);
        let h = evaluate_measurements(&m, &s, &plan).unwrap();
        for (k, e) in plan.entries().iter().enumerate() {
            let expect = match e.kind {
                MeasurementKind::VoltageMagnitude => bus_voltages(&m, &s).unwrap()[m.bus_index(e.location).unwrap()].0,
                MeasurementKind::RealInjection => injected_power(&m, &s, e.location).unwrap().0,
                _ => unreachable!(),
            };
            assert_eq!(h.0[k], expect);
        }
    }

    #[test]
    fn plan_rejects_bad_entries() {
        let m = ieee14();
        let e = MeasurementEntry::new(MeasurementKind::VoltageMagnitude, 3);
        assert!(matches!(
            MeasurementPlan::new(&m, vec![e, e]),
            Err(PowerFlowError::DuplicateEntry(_))
        ));
        assert!(matches!(
            MeasurementPlan::new(&m, vec![MeasurementEntry::new(MeasurementKind::RealFlow, 20)]),
            Err(PowerFlowError::UnknownBranch(20))
        ));
        assert!(matches!(
            MeasurementPlan::new(&m, vec![MeasurementEntry::new(MeasurementKind::RealInjection, 15)]),
            Err(PowerFlowError::UnknownBus(15))
        ));
    }

    #[test]
    fn random_plan_is_seeded_and_valid() {
        let m = ieee14();
        let a = MeasurementPlan::random(&m, 28, 3);
        assert_eq!(a, MeasurementPlan::random(&m, 28, 3));
        assert_eq!(a.len(), 28);
        assert!(MeasurementPlan::new(&m, a.entries().to_vec()).is_ok());
        let b = MeasurementPlan::random(&m, 40, 3);
        assert_eq!(b.len(), 40);
        assert_ne!(MeasurementPlan::random(&m, 20, 3), MeasurementPlan::random(&m, 20, 4));
    }

    #[test]
    fn jacobian_voltage_rows_are_unit_vectors() {
        let m = ieee14();
        let s = ieee14_solved();
        let plan = MeasurementPlan::voltages_and_injections(&m);
        let j = numerical_jacobian(&m, &s, &plan, 1e-6).unwrap();
        assert!(j.row(0).iter().all(|&v| v.abs() < 1e-9));
        for k in 1..14 {
            for l in 0..26 {
                let expect = if l == k - 1 { 1.0 } else { 0.0 };
                assert!((j[(k, l)] - expect).abs() < 1e-9);
            }
        }
        assert!(matches!(
            numerical_jacobian(&m, &s, &plan, 0.0),
            Err(PowerFlowError::InvalidStep)
        ));
    }

    fn dc_plan(m: &NetworkModel) -> MeasurementPlan {
        MeasurementPlan::new(
            m,
            m.buses()
                .iter()
                .map(|b| MeasurementEntry::new(MeasurementKind::DcRealInjection, b.id))
                .collect(),
        )
        .unwrap()
    }

    /// Builds the DC matrix directly from branch reactances, independent of the code path.
    fn analytic_dc_matrix(m: &NetworkModel) -> DMatrix<f64> {
        let n = m.bus_count();
        let mut b = DMatrix::zeros(n, 2 * (n - 1));
        for br in m.branches() {
            let z = Complex::new(br.r, br.x);
            let susc = -(z.inv() / br.tap).im;
            let i = m.bus_index(br.from_bus).unwrap();
            let j = m.bus_index(br.to_bus).unwrap();
            for (row, other, sign) in [(i, j, 1.0), (j, i, 1.0)] {
                if row != 0 {
                    b[(row, n - 1 + row - 1)] += sign * susc;
                }
                if other != 0 {
                    b[(row, n - 1 + other - 1)] -= sign * susc;
                }
            }
        }
        b
    }

    #[test]
    fn dc_jacobian_matches_analytic_matrix() {
        let m = ieee14();
        let plan = dc_plan(&m);
        let j = numerical_jacobian(&m, &ieee14_solved(), &plan, 1e-6).unwrap();
        let b = analytic_dc_matrix(&m);
        assert!((j - b).amax() < 1e-8);
    }

    #[test]
    fn jacobian_is_second_order() {
        let m = ieee14();
        let s = ieee14_solved();
        let plan = MeasurementPlan::voltages_and_injections(&m);
        let obs = GridObservation::new(&m, &plan).unwrap();
        // Reference: Richardson extrapolation of two central differences.
        let err = |h: f64| {
            let j1 = numerical_jacobian(&m, &s, &plan, h).unwrap();
            let j2 = numerical_jacobian(&m, &s, &plan, h / 2.0).unwrap();
            let reference = (&j2 * 4.0 - &j1) / 3.0;
            (j1 - reference).amax()
        };
        let (e1, e2) = (err(2e-2), err(1e-2));
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
        assert_eq!(obs.measurement_dim(), 28);
    }

    #[test]
    fn power_flow_matches_published_solution() {
        let m = ieee14();
        let s = solve_power_flow(&m, &LoadTable::nominal(&m), 1e-10, 20).unwrap();
        let reference = ieee14_solved();
        let err = (s.as_vector() - reference.as_vector()).amax();
        assert!(err < 1e-4, "max deviation {err}");
    }

    #[test]
    fn power_flow_flat_and_infeasible() {
        let mut b1 = BusRecord::new(1, BusKind::Slack);
        b1.vm = 1.0;
        let m = NetworkModel::new(
            vec![b1, BusRecord::new(2, BusKind::Pq), BusRecord::new(3, BusKind::Pv)],
            vec![
                BranchRecord::line(1, 2, 0.01, 0.1, 0.0),
                BranchRecord::line(2, 3, 0.02, 0.2, 0.0),
            ],
            100.0,
        )
        .unwrap();
        let zero = LoadTable {
            p: vec![0.0; 3],
            q: vec![0.0; 3],
        };
        let s = solve_power_flow(&m, &zero, 1e-10, 20).unwrap();
        assert!(s.vm().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(s.va().iter().all(|&v| v.abs() < 1e-12));

        let m = ieee14();
        let heavy = LoadTable::nominal(&m).scaled(1e6);
        assert!(matches!(
            solve_power_flow(&m, &heavy, 1e-10, 20),
            Err(PowerFlowError::NonConvergence { .. })
        ));
    }

    #[test]
    fn power_balance_at_solved_state() {
        let m = ieee14();
        let s = solve_power_flow(&m, &LoadTable::nominal(&m), 1e-10, 20).unwrap();
        let total: f64 = m.buses().iter().map(|b| injected_power(&m, &s, b.id).unwrap().0).sum();
        let v = bus_voltages(&m, &s).unwrap();
        let mut losses = 0.0;
        for k in 0..m.branches().len() as u32 {
            let loss = branch_flow(&m, &s, k).unwrap().0 + branch_flow_reverse(&m, &s, k).unwrap().0;
            assert!(loss >= -1e-12);
            losses += loss;
        }
        let shunt: f64 = m.buses().iter().zip(&v).map(|(b, (vm, _))| vm * vm * b.shunt_g).sum();
        assert!((total - losses - shunt).abs() < 1e-10);
    }

    fn arb_state(n: usize) -> impl Strategy<Value = StateVector> {
        (
            prop::collection::vec(0.85f64..1.15, n),
            prop::collection::vec(-0.6f64..0.6, n),
        )
            .prop_map(|(vm, va)| StateVector::from_parts(&vm, &va))
    }

    proptest! {
        #[test]
        fn complex_power_identity(s in arb_state(13), k in 0u32..20) {
            let m = ieee14();
            let (p, q) = branch_flow(&m, &s, k).unwrap();
            let (re, im) = branch_current(&m, &s, k).unwrap();
            let br = &m.branches()[k as usize];
            let (vm, va) = bus_voltages(&m, &s).unwrap()[m.bus_index(br.from_bus).unwrap()];
            let sv = Complex::from_polar(vm, va) * Complex::new(re, im).conj();
            prop_assert!((sv.re - p).abs() < 1e-10);
            prop_assert!((sv.im - q).abs() < 1e-10);
        }

        #[test]
        fn compiled_observation_matches_per_entry(s in arb_state(13), seed in 0u64..50) {
            let m = ieee14();
            let mut entries = MeasurementPlan::random(&m, 60, seed).entries().to_vec();
            entries.extend((0..20).map(|k| MeasurementEntry::new(MeasurementKind::CurrentRe, k)));
            entries.extend((0..20).map(|k| MeasurementEntry::new(MeasurementKind::CurrentIm, k)));
            entries.extend([1, 5].map(|b| MeasurementEntry::new(MeasurementKind::DcRealInjection, b)));
            let plan = MeasurementPlan::new(&m, entries).unwrap();
            let a = evaluate_measurements(&m, &s, &plan).unwrap();
            let b = GridObservation::new(&m, &plan).unwrap().evaluate(s.as_vector());
            prop_assert!((a.0 - b).amax() < 1e-13);
        }

        #[test]
        fn dc_superposition(a in prop::collection::vec(-0.5f64..0.5, 13), b in prop::collection::vec(-0.5f64..0.5, 13), bus in 1u32..=14) {
            let m = ieee14();
            let ones = vec![1.0; 13];
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let f = |va: &[f64]| dc_injected_power(&m, &StateVector::from_parts(&ones, va), bus).unwrap();
            prop_assert!((f(&sum) - f(&a) - f(&b)).abs() < 1e-12);
        }
    }
}
