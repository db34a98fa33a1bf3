use std::sync::Arc;

use super::{check_dim, Model, StateVector, Trajectory};
use crate::covariance::CovarianceModel;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Maps a model state to observation space.
pub trait ObservationOperator: Send + Sync {
    fn nvar(&self) -> usize;

    fn obs_dim(&self) -> usize;

    fn observe(&self, x: &[f64]) -> Vec<f64>;

    /// Jacobian at `x` applied to `dx`.
    fn jvp(&self, x: &[f64], dx: &[f64]) -> Vec<f64>;

    /// Jacobian transpose at `x` applied to the observation-space vector `w`.
    fn adjoint(&self, x: &[f64], w: &[f64]) -> Vec<f64>;
}

/// Component-wise square, `H(x)_i = x_i^2`.
#[derive(Debug, Clone)]
pub struct QuadraticOperator {
    pub nvar: usize,
}

impl ObservationOperator for QuadraticOperator {
    fn nvar(&self) -> usize {
        self.nvar
    }

    fn obs_dim(&self) -> usize {
        self.nvar
    }

    fn observe(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v * v).collect()
    }

    fn jvp(&self, x: &[f64], dx: &[f64]) -> Vec<f64> {
        x.iter().zip(dx).map(|(v, d)| 2.0 * v * d).collect()
    }

    fn adjoint(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        x.iter().zip(w).map(|(v, d)| 2.0 * v * d).collect()
    }
}

/// Observes a subset of state components directly.
#[derive(Debug, Clone)]
pub struct LinearSelection {
    nvar: usize,
    indices: Vec<usize>,
}

impl LinearSelection {
    pub fn new(nvar: usize, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= nvar) {
            return Err(Error::InvalidArgument(format!("observed index {bad} >= nvar {nvar}")));
        }
        Ok(Self { nvar, indices })
    }

    pub fn identity(nvar: usize) -> Self {
        Self { nvar, indices: (0..nvar).collect() }
    }

    /// Every `stride`-th component starting at 0.
    pub fn every(nvar: usize, stride: usize) -> Self {
        Self { nvar, indices: (0..nvar).step_by(stride.max(1)).collect() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl ObservationOperator for LinearSelection {
    fn nvar(&self) -> usize {
        self.nvar
    }

    fn obs_dim(&self) -> usize {
        self.indices.len()
    }

    fn observe(&self, x: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| x[i]).collect()
    }

    fn jvp(&self, _x: &[f64], dx: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| dx[i]).collect()
    }

    fn adjoint(&self, _x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nvar];
        for (&i, v) in self.indices.iter().zip(w) {
            out[i] += v;
        }
        out
    }
}

/// Wraps an arbitrary map and approximates its Jacobian by central
/// differences. Fallback for user operators without an analytic Jacobian.
pub struct FiniteDifferenceOperator<F> {
    nvar: usize,
    obs_dim: usize,
    map: F,
    eps: f64,
}

impl<F> FiniteDifferenceOperator<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(nvar: usize, obs_dim: usize, map: F) -> Self {
        Self { nvar, obs_dim, map, eps: 1e-6 }
    }

    fn jacobian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        // columns of the Jacobian
        (0..self.nvar)
            .map(|j| {
                let h = self.eps * x[j].abs().max(1.0);
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[j] += h;
                xm[j] -= h;
                let fp = (self.map)(&xp);
                let fm = (self.map)(&xm);
                fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            })
            .collect()
    }
}

impl<F> ObservationOperator for FiniteDifferenceOperator<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn nvar(&self) -> usize {
        self.nvar
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn observe(&self, x: &[f64]) -> Vec<f64> {
        (self.map)(x)
    }

    fn jvp(&self, x: &[f64], dx: &[f64]) -> Vec<f64> {
        let cols = self.jacobian(x);
        let mut out = vec![0.0; self.obs_dim];
        for (col, d) in cols.iter().zip(dx) {
            for (o, c) in out.iter_mut().zip(col) {
                *o += c * d;
            }
        }
        out
    }

    fn adjoint(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        self.jacobian(x)
            .iter()
            .map(|col| col.iter().zip(w).map(|(c, v)| c * v).sum())
            .collect()
    }
}

/// Observations inside one assimilation window.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    error_cov: Vec<Arc<CovarianceModel>>,
}

impl ObservationSet {
    pub fn new(
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
        error_cov: Vec<Arc<CovarianceModel>>,
    ) -> Result<Self> {
        if times.len() != values.len() || times.len() != error_cov.len() {
            return Err(Error::InvalidArgument(format!(
                "observation lists differ in length: {} times, {} values, {} covariances",
                times.len(),
                values.len(),
                error_cov.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("observation times must be strictly ascending".into()));
        }
        for (y, r) in values.iter().zip(&error_cov) {
            if y.len() != r.dim() {
                return Err(Error::DimensionMismatch { expected: r.dim(), found: y.len() });
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("observation"));
            }
        }
        Ok(Self { times, values, error_cov })
    }

    pub fn empty() -> Self {
        Self { times: vec![], values: vec![], error_cov: vec![] }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn error_cov(&self) -> &[Arc<CovarianceModel>] {
        &self.error_cov
    }
}

/// Integrates the reference trajectory from `x_true0` at `t0` and builds
/// synthetic observations `y_k = H(x_k) + noise_scale * eta_k`,
/// `eta_k ~ N(0, diag(error_std^2))`, at each of `obs_times`.
///
/// The returned trajectory is sampled at `t0` followed by every observation
/// time after `t0`.
#[allow(clippy::too_many_arguments)]
pub fn generate_truth_and_observations(
    model: &dyn Model,
    op: &dyn ObservationOperator,
    x_true0: &StateVector,
    t0: f64,
    obs_times: &[f64],
    error_std: &[f64],
    noise_scale: f64,
    seed: u64,
) -> Result<(Trajectory, ObservationSet)> {
    check_dim(model, x_true0)?;
    if error_std.len() != op.obs_dim() {
        return Err(Error::DimensionMismatch { expected: op.obs_dim(), found: error_std.len() });
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise scale {noise_scale} must be >= 0")));
    }
    let mut sample_times = vec![t0];
    sample_times.extend(obs_times.iter().copied().filter(|&t| t > t0));
    let truth = Trajectory::sample(model, x_true0, &sample_times)?;

    let r = Arc::new(CovarianceModel::diagonal(error_std.iter().map(|s| s * s).collect())?);
    let mut rng = rng::stream(seed, Stream::ObservationNoise);
    let mut values = Vec::with_capacity(obs_times.len());
    for &tk in obs_times {
        let idx = truth
            .times
            .iter()
            .position(|&t| t == tk)
            .ok_or(Error::InvalidInterval { t0, t1: tk })?;
        let mut y = op.observe(&truth.states[idx]);
        for (v, s) in y.iter_mut().zip(error_std) {
            *v += noise_scale * s * rng::standard_normal(&mut rng);
        }
        values.push(y);
    }
    let obs = ObservationSet::new(obs_times.to_vec(), values, vec![r; obs_times.len()])?;
    Ok((truth, obs))
}
