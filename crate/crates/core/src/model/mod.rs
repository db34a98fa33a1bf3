//! Dynamical models, their tangent-linear and adjoint propagators, and
//! observation operators.
//!
//! Models only supply the vector field and its Jacobian-vector products.
//! Time stepping is classical fixed-step RK4; the tangent-linear and adjoint
//! propagators are the exact linearisation and transpose of the discrete RK4
//! map, so gradients of discrete costs are exact to round-off.

mod double_well;
mod lorenz96;
mod observation;

use std::ops::Deref;

pub use double_well::DoubleWell;
pub use lorenz96::Lorenz96;
pub use observation::{
    generate_truth_and_observations, FiniteDifferenceOperator, LinearSelection, ObservationOperator,
    ObservationSet, QuadraticOperator,
};

use crate::error::{Error, Result};

/// Model state at one time instant. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Self(values))
        } else {
            Err(Error::NonFinite("state vector"))
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for StateVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for StateVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for StateVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// An autonomous ODE `dx/dt = f(x)` integrated with fixed-step RK4.
///
/// Implementations must be immutable after construction; every method is
/// reentrant.
pub trait Model: Send + Sync {
    fn nvar(&self) -> usize;

    /// Inner integrator step.
    fn step_size(&self) -> f64;

    /// `out = f(x)`
    fn tendency(&self, x: &[f64], out: &mut [f64]);

    /// `out = f'(x) dx`
    fn tendency_jvp(&self, x: &[f64], dx: &[f64], out: &mut [f64]);

    /// `out = f'(x)^T lambda`
    fn tendency_vjp(&self, x: &[f64], lambda: &[f64], out: &mut [f64]);
}

/// `dx/dt = 0`. Used for linear-Gaussian checks.
#[derive(Debug, Clone)]
pub struct Stationary {
    pub nvar: usize,
    pub step: f64,
}

impl Model for Stationary {
    fn nvar(&self) -> usize {
        self.nvar
    }

    fn step_size(&self) -> f64 {
        self.step
    }

    fn tendency(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn tendency_jvp(&self, _x: &[f64], _dx: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn tendency_vjp(&self, _x: &[f64], _lambda: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Number of integrator steps covering `[t0, t1]`; fails unless the interval
/// is a whole number of steps.
pub fn steps_between(model: &dyn Model, t0: f64, t1: f64) -> Result<usize> {
    if !(t1 >= t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::InvalidInterval { t0, t1 });
    }
    let h = model.step_size();
    let n = (t1 - t0) / h;
    let rounded = n.round();
    if (n - rounded).abs() > 1e-6 {
        return Err(Error::MisalignedTime { time: t1, step: h });
    }
    Ok(rounded as usize)
}

/// Scratch buffers for one RK4 step and its linearisations.
pub(crate) struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    x2: Vec<f64>,
    x3: Vec<f64>,
    x4: Vec<f64>,
    next: Vec<f64>,
    u: Vec<f64>,
}

impl Rk4Workspace {
    pub(crate) fn new(n: usize) -> Self {
        let z = || vec![0.0; n];
        Self { k1: z(), k2: z(), k3: z(), k4: z(), x2: z(), x3: z(), x4: z(), next: z(), u: z() }
    }
}

/// Stage states `x2, x3, x4` and the stepped state `next`.
fn rk4_stages(model: &dyn Model, x: &[f64], ws: &mut Rk4Workspace) {
    let h = model.step_size();
    let Rk4Workspace { k1, k2, k3, k4, x2, x3, x4, next, .. } = ws;
    model.tendency(x, k1);
    for i in 0..x.len() {
        x2[i] = x[i] + 0.5 * h * k1[i];
    }
    model.tendency(x2, k2);
    for i in 0..x.len() {
        x3[i] = x[i] + 0.5 * h * k2[i];
    }
    model.tendency(x3, k3);
    for i in 0..x.len() {
        x4[i] = x[i] + h * k3[i];
    }
    model.tendency(x4, k4);
    for i in 0..x.len() {
        next[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn rk4_step_with(model: &dyn Model, x: &mut [f64], ws: &mut Rk4Workspace) {
    rk4_stages(model, x, ws);
    x.copy_from_slice(&ws.next);
}

/// One RK4 step in place.
pub fn rk4_step(model: &dyn Model, x: &mut [f64]) {
    rk4_step_with(model, x, &mut Rk4Workspace::new(x.len()));
}

/// Tangent-linear RK4 step at basepoint `x`, applied to `dx` in place.
fn rk4_step_tlm(model: &dyn Model, x: &[f64], dx: &mut [f64], ws: &mut Rk4Workspace) {
    let h = model.step_size();
    rk4_stages(model, x, ws);
    let Rk4Workspace { k1: d1, k2: d2, k3: d3, k4: d4, x2, x3, x4, u, .. } = ws;
    model.tendency_jvp(x, dx, d1);
    for i in 0..x.len() {
        u[i] = dx[i] + 0.5 * h * d1[i];
    }
    model.tendency_jvp(x2, u, d2);
    for i in 0..x.len() {
        u[i] = dx[i] + 0.5 * h * d2[i];
    }
    model.tendency_jvp(x3, u, d3);
    for i in 0..x.len() {
        u[i] = dx[i] + h * d3[i];
    }
    model.tendency_jvp(x4, u, d4);
    for i in 0..x.len() {
        dx[i] += h / 6.0 * (d1[i] + 2.0 * d2[i] + 2.0 * d3[i] + d4[i]);
    }
}

/// Transpose of [`rk4_step_tlm`] at basepoint `x`, applied to `lambda` in place.
fn rk4_step_adjoint(model: &dyn Model, x: &[f64], lambda: &mut [f64], ws: &mut Rk4Workspace) {
    let n = x.len();
    let h = model.step_size();
    rk4_stages(model, x, ws);
    let Rk4Workspace { k1: a1, k2: a2, k3: a3, k4: a4, x2, x3, x4, u, .. } = ws;
    for i in 0..n {
        a1[i] = h / 6.0 * lambda[i];
        a2[i] = h / 3.0 * lambda[i];
        a3[i] = a2[i];
        a4[i] = a1[i];
    }
    model.tendency_vjp(x4, a4, u);
    for i in 0..n {
        lambda[i] += u[i];
        a3[i] += h * u[i];
    }
    model.tendency_vjp(x3, a3, u);
    for i in 0..n {
        lambda[i] += u[i];
        a2[i] += 0.5 * h * u[i];
    }
    model.tendency_vjp(x2, a2, u);
    for i in 0..n {
        lambda[i] += u[i];
        a1[i] += 0.5 * h * u[i];
    }
    model.tendency_vjp(x, a1, u);
    for i in 0..n {
        lambda[i] += u[i];
    }
}

fn check_dim(model: &dyn Model, v: &[f64]) -> Result<()> {
    if v.len() != model.nvar() {
        return Err(Error::DimensionMismatch { expected: model.nvar(), found: v.len() });
    }
    Ok(())
}

fn ensure_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged)
    }
}

/// Advances `x` by `steps` RK4 steps, returning every intermediate state
/// including the start (length `steps + 1`).
pub fn trajectory_steps(model: &dyn Model, x0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    check_dim(model, x0)?;
    let mut flat = Vec::new();
    segment_states(model, x0, steps, &mut flat, &mut Rk4Workspace::new(x0.len()))?;
    Ok(flat.chunks(x0.len().max(1)).map(<[f64]>::to_vec).collect())
}

/// Fills `out` with the `steps + 1` states of a segment, stored end to end.
pub(crate) fn segment_states(
    model: &dyn Model,
    x0: &[f64],
    steps: usize,
    out: &mut Vec<f64>,
    ws: &mut Rk4Workspace,
) -> Result<()> {
    let n = x0.len();
    out.clear();
    out.reserve((steps + 1) * n);
    out.extend_from_slice(x0);
    for j in 0..steps {
        rk4_stages(model, &out[j * n..(j + 1) * n], ws);
        ensure_finite(&ws.next)?;
        out.extend_from_slice(&ws.next);
    }
    Ok(())
}

/// Advances `x` in place by `steps` RK4 steps.
pub fn advance(model: &dyn Model, x: &mut [f64], steps: usize) -> Result<()> {
    advance_with(model, x, steps, &mut Rk4Workspace::new(x.len()))
}

pub(crate) fn advance_with(model: &dyn Model, x: &mut [f64], steps: usize, ws: &mut Rk4Workspace) -> Result<()> {
    for _ in 0..steps {
        rk4_step_with(model, x, ws);
        ensure_finite(x)?;
    }
    Ok(())
}

/// Solution of the model at `t1` starting from `x0` at `t0`.
pub fn propagate(model: &dyn Model, x0: &StateVector, t0: f64, t1: f64) -> Result<StateVector> {
    check_dim(model, x0)?;
    let steps = steps_between(model, t0, t1)?;
    let mut x = x0.to_vec();
    advance(model, &mut x, steps)?;
    Ok(StateVector(x))
}

/// Tangent-linear propagation of `dx0` along the trajectory starting at `base`.
pub fn propagate_tlm(
    model: &dyn Model,
    base: &StateVector,
    dx0: &[f64],
    t0: f64,
    t1: f64,
) -> Result<Vec<f64>> {
    check_dim(model, base)?;
    check_dim(model, dx0)?;
    let steps = steps_between(model, t0, t1)?;
    let mut ws = Rk4Workspace::new(base.len());
    let mut x = base.to_vec();
    let mut dx = dx0.to_vec();
    for _ in 0..steps {
        rk4_step_tlm(model, &x, &mut dx, &mut ws);
        x.copy_from_slice(&ws.next);
        ensure_finite(&x)?;
    }
    Ok(dx)
}

/// Adjoint propagation of `lambda1` (at `t1`) back to `t0` along the
/// trajectory starting at `base`.
pub fn propagate_adjoint(
    model: &dyn Model,
    base: &StateVector,
    lambda1: &[f64],
    t0: f64,
    t1: f64,
) -> Result<Vec<f64>> {
    check_dim(model, base)?;
    check_dim(model, lambda1)?;
    let steps = steps_between(model, t0, t1)?;
    let mut ws = Rk4Workspace::new(base.len());
    let mut states = Vec::new();
    segment_states(model, base, steps, &mut states, &mut ws)?;
    let mut lambda = lambda1.to_vec();
    adjoint_sweep(model, &states, &mut lambda, &mut ws);
    Ok(lambda)
}

/// Pulls `lambda` back across the steps of a segment stored end to end by
/// [`segment_states`]; the last state is the segment end.
pub(crate) fn adjoint_sweep(model: &dyn Model, states: &[f64], lambda: &mut [f64], ws: &mut Rk4Workspace) {
    let n = lambda.len();
    if n == 0 {
        return;
    }
    let count = states.len() / n;
    for j in (0..count.saturating_sub(1)).rev() {
        rk4_step_adjoint(model, &states[j * n..(j + 1) * n], lambda, ws);
    }
}

/// States sampled at a list of times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
}

impl Trajectory {
    /// Integrates from `x0` at `times[0]` and samples at every entry of `times`.
    pub fn sample(model: &dyn Model, x0: &StateVector, times: &[f64]) -> Result<Self> {
        check_dim(model, x0)?;
        let mut states = Vec::with_capacity(times.len());
        let mut x = x0.clone();
        let mut t = match times.first() {
            Some(t) => *t,
            None => return Ok(Self { times: vec![], states: vec![] }),
        };
        for &tk in times {
            x = propagate(model, &x, t, tk)?;
            t = tk;
            states.push(x.clone());
        }
        Ok(Self { times: times.to_vec(), states })
    }
}
