//! Strong-constraint 4D-Var cost, its adjoint gradient, and the posterior
//! kernel `exp(-J)`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::covariance::CovarianceModel;
use crate::error::{Error, Result};
use crate::model::{
    adjoint_sweep, advance_with, segment_states, steps_between, Model, ObservationOperator, Rk4Workspace,
    ObservationSet, StateVector,
};

/// A scalar function with gradient. Both the L-BFGS minimiser and the HMC
/// sampler (as potential energy) consume this.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64>;

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.value(x)?, self.gradient(x)?))
    }
}

/// Counts forward and adjoint model sweeps. Shared between clones of a window.
#[derive(Debug, Default)]
pub struct RunCounters {
    forward: AtomicU64,
    adjoint: AtomicU64,
}

impl RunCounters {
    pub fn forward_runs(&self) -> u64 {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn adjoint_runs(&self) -> u64 {
        self.adjoint.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.adjoint.store(0, Ordering::Relaxed);
    }

    fn record_forward(&self) {
        self.forward.fetch_add(1, Ordering::Relaxed);
    }

    fn record_adjoint(&self) {
        self.adjoint.fetch_add(1, Ordering::Relaxed);
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Everything needed to evaluate the cost over `[t0, tF]`.
#[derive(Clone)]
pub struct AssimilationWindow {
    t0: f64,
    tf: f64,
    background: StateVector,
    b0: Arc<CovarianceModel>,
    observations: ObservationSet,
    model: Arc<dyn Model>,
    obs_operator: Arc<dyn ObservationOperator>,
    /// integrator steps from the previous checkpoint (t0 for the first) to each observation
    segments: Vec<usize>,
    counters: Arc<RunCounters>,
}

impl std::fmt::Debug for AssimilationWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AssimilationWindow")
            .field("t0", &self.t0)
            .field("tf", &self.tf)
            .field("nvar", &self.background.len())
            .field("n_obs", &self.observations.len())
            .finish()
    }
}

impl AssimilationWindow {
    pub fn new(
        t0: f64,
        tf: f64,
        background: StateVector,
        b0: Arc<CovarianceModel>,
        observations: ObservationSet,
        model: Arc<dyn Model>,
        obs_operator: Arc<dyn ObservationOperator>,
    ) -> Result<Self> {
        if !(t0 < tf) {
            return Err(Error::InvalidInterval { t0, t1: tf });
        }
        let n = model.nvar();
        for found in [background.len(), b0.dim(), obs_operator.nvar()] {
            if found != n {
                return Err(Error::DimensionMismatch { expected: n, found });
            }
        }
        for y in observations.values() {
            if y.len() != obs_operator.obs_dim() {
                return Err(Error::DimensionMismatch { expected: obs_operator.obs_dim(), found: y.len() });
            }
        }
        let mut segments = Vec::with_capacity(observations.len());
        let mut prev = t0;
        for &t in observations.times() {
            let tol = 1e-9 * t.abs().max(1.0);
            if t < t0 - tol || t > tf + tol {
                return Err(Error::InvalidArgument(format!("observation time {t} outside [{t0}, {tf}]")));
            }
            segments.push(steps_between(model.as_ref(), prev, t)?);
            prev = t;
        }
        steps_between(model.as_ref(), t0, tf)?;
        Ok(Self {
            t0,
            tf,
            background,
            b0,
            observations,
            model,
            obs_operator,
            segments,
            counters: Arc::new(RunCounters::default()),
        })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn background(&self) -> &StateVector {
        &self.background
    }

    pub fn b0(&self) -> &Arc<CovarianceModel> {
        &self.b0
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.observations
    }

    pub fn model(&self) -> &Arc<dyn Model> {
        &self.model
    }

    pub fn obs_operator(&self) -> &Arc<dyn ObservationOperator> {
        &self.obs_operator
    }

    pub fn counters(&self) -> &Arc<RunCounters> {
        &self.counters
    }

    pub fn nvar(&self) -> usize {
        self.background.len()
    }

    /// Same window with a new background state.
    pub fn with_background(&self, background: StateVector) -> Result<Self> {
        if background.len() != self.nvar() {
            return Err(Error::DimensionMismatch { expected: self.nvar(), found: background.len() });
        }
        Ok(Self { background, ..self.clone() })
    }

    /// Same window with a new background covariance.
    pub fn with_b0(&self, b0: Arc<CovarianceModel>) -> Result<Self> {
        if b0.dim() != self.nvar() {
            return Err(Error::DimensionMismatch { expected: self.nvar(), found: b0.dim() });
        }
        Ok(Self { b0, ..self.clone() })
    }

    /// Same window with its own, fresh counters.
    pub fn with_fresh_counters(&self) -> Self {
        Self { counters: Arc::new(RunCounters::default()), ..self.clone() }
    }

    fn check_x0(&self, x0: &[f64]) -> Result<()> {
        if x0.len() != self.nvar() {
            return Err(Error::DimensionMismatch { expected: self.nvar(), found: x0.len() });
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial state"));
        }
        Ok(())
    }

    fn background_departure(&self, x0: &[f64]) -> Vec<f64> {
        x0.iter().zip(self.background.iter()).map(|(a, b)| a - b).collect()
    }

    fn residual(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let hx = self.obs_operator.observe(x);
        hx.iter().zip(&self.observations.values()[k]).map(|(a, b)| a - b).collect()
    }

    /// `J(x0)`: background term plus observation misfits, summed with
    /// compensation.
    pub fn cost(&self, x0: &[f64]) -> Result<f64> {
        self.check_x0(x0)?;
        self.counters.record_forward();
        let mut terms = Vec::with_capacity(self.segments.len() + 1);
        terms.push(0.5 * self.b0.inverse_quadratic_form(&self.background_departure(x0))?);
        let mut ws = Rk4Workspace::new(x0.len());
        let mut x = x0.to_vec();
        for (k, &steps) in self.segments.iter().enumerate() {
            advance_with(self.model.as_ref(), &mut x, steps, &mut ws)?;
            let d = self.residual(k, &x);
            terms.push(0.5 * self.observations.error_cov()[k].inverse_quadratic_form(&d)?);
        }
        Ok(compensated_sum(terms))
    }

    /// Forward sweep keeping only the states at observation times, then an
    /// adjoint sweep that recomputes each segment from its checkpoint.
    pub fn cost_and_gradient(&self, x0: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_x0(x0)?;
        self.counters.record_forward();
        let dep = self.background_departure(x0);
        let mut terms = Vec::with_capacity(self.segments.len() + 1);
        terms.push(0.5 * self.b0.inverse_quadratic_form(&dep)?);

        let mut ws = Rk4Workspace::new(x0.len());
        let mut checkpoints = Vec::with_capacity(self.segments.len());
        let mut forcings = Vec::with_capacity(self.segments.len());
        let mut x = x0.to_vec();
        for (k, &steps) in self.segments.iter().enumerate() {
            advance_with(self.model.as_ref(), &mut x, steps, &mut ws)?;
            let (term, forcing) = self.misfit(k, &x)?;
            terms.push(term);
            forcings.push(forcing);
            checkpoints.push(x.clone());
        }

        self.counters.record_adjoint();
        let mut lambda = vec![0.0; x0.len()];
        let mut states = Vec::new();
        for k in (0..self.segments.len()).rev() {
            lambda.iter_mut().zip(&forcings[k]).for_each(|(l, f)| *l += f);
            let start = if k == 0 { x0 } else { checkpoints[k - 1].as_slice() };
            segment_states(self.model.as_ref(), start, self.segments[k], &mut states, &mut ws)?;
            adjoint_sweep(self.model.as_ref(), &states, &mut lambda, &mut ws);
        }
        let bg = self.b0.solve(&dep)?;
        lambda.iter_mut().zip(&bg).for_each(|(l, b)| *l += b);
        Ok((compensated_sum(terms), lambda))
    }

    /// Observation term and adjoint forcing `H^T R^{-1} (H(x) - y)` at obs `k`.
    fn misfit(&self, k: usize, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.residual(k, x);
        let rinv_d = self.observations.error_cov()[k].solve(&d)?;
        let term = 0.5 * d.iter().zip(&rinv_d).map(|(a, b)| a * b).sum::<f64>();
        Ok((term, self.obs_operator.adjoint(x, &rinv_d)))
    }

    pub fn gradient(&self, x0: &[f64]) -> Result<Vec<f64>> {
        self.cost_and_gradient(x0).map(|(_, g)| g)
    }

    /// Gradient from a forward sweep that stores every integrator state.
    #[cfg(test)]
    pub(crate) fn gradient_full_storage(&self, x0: &[f64]) -> Result<Vec<f64>> {
        self.check_x0(x0)?;
        let total: usize = self.segments.iter().sum();
        let n = x0.len();
        let mut ws = Rk4Workspace::new(n);
        let mut states = Vec::new();
        segment_states(self.model.as_ref(), x0, total, &mut states, &mut ws)?;
        let mut obs_index = Vec::with_capacity(self.segments.len());
        let mut acc = 0;
        for &s in &self.segments {
            acc += s;
            obs_index.push(acc);
        }
        let mut lambda = vec![0.0; x0.len()];
        let mut cursor = total;
        for k in (0..self.segments.len()).rev() {
            let (_, forcing) = self.misfit(k, &states[obs_index[k] * n..(obs_index[k] + 1) * n])?;
            debug_assert_eq!(cursor, obs_index[k]);
            lambda.iter_mut().zip(&forcing).for_each(|(l, f)| *l += f);
            let from = obs_index[k] - self.segments[k];
            adjoint_sweep(self.model.as_ref(), &states[from * n..(obs_index[k] + 1) * n], &mut lambda, &mut ws);
            cursor = from;
        }
        let bg = self.b0.solve(&self.background_departure(x0))?;
        lambda.iter_mut().zip(&bg).for_each(|(l, b)| *l += b);
        Ok(lambda)
    }

    /// `-J(x0)`; its exponential is the unnormalised posterior density.
    pub fn posterior_log_kernel(&self, x0: &[f64]) -> Result<f64> {
        self.cost(x0).map(|j| -j)
    }
}

impl Objective for AssimilationWindow {
    fn dim(&self) -> usize {
        self.nvar()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        self.cost(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        AssimilationWindow::gradient(self, x)
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.cost_and_gradient(x)
    }
}

pub fn cost(win: &AssimilationWindow, x0: &StateVector) -> Result<f64> {
    win.cost(x0)
}

pub fn gradient(win: &AssimilationWindow, x0: &StateVector) -> Result<StateVector> {
    StateVector::new(win.gradient(x0)?)
}

pub fn posterior_log_kernel(win: &AssimilationWindow, x0: &StateVector) -> Result<f64> {
    win.posterior_log_kernel(x0)
}
