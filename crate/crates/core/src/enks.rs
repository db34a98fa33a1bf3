//! Perturbed-observation ensemble Kalman filter update and the fixed-point
//! ensemble Kalman smoother anchored at the window start.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::cost::AssimilationWindow;
use crate::covariance::{ensemble_covariance, ensemble_mean, CovarianceModel, Ensemble};
use crate::error::{Error, Result};
use crate::io::{write_matrix, write_matrix_csv, RawMatrix};
use crate::model::{propagate, ObservationOperator, StateVector};
use crate::rng;

/// Right-multiplying ensemble transform at one observation time.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformRecord {
    pub time: f64,
    pub matrix: DMatrix<f64>,
}

/// Stochastic EnKF analysis `x_e + K (y + eta_e - H(x_e))` with
/// `K = P H^T (H P H^T + R)^{-1}` estimated from observation-space anomalies.
/// Also returns `T` with `X^a = X^b T`.
pub fn enkf_update<R: Rng + ?Sized>(
    forecast: &Ensemble,
    y: &[f64],
    r_k: &CovarianceModel,
    obs_op: &dyn ObservationOperator,
    rng: &mut R,
) -> Result<(Ensemble, DMatrix<f64>)> {
    let n = forecast.len();
    if n < 2 {
        return Err(Error::InsufficientMembers(n));
    }
    let nvar = forecast.nvar();
    if obs_op.nvar() != nvar {
        return Err(Error::DimensionMismatch { expected: obs_op.nvar(), found: nvar });
    }
    let p = obs_op.obs_dim();
    if y.len() != p || r_k.dim() != p {
        return Err(Error::DimensionMismatch { expected: p, found: if y.len() != p { y.len() } else { r_k.dim() } });
    }

    let x = forecast.to_matrix();
    let mut hx = DMatrix::zeros(p, n);
    for (e, m) in forecast.members().iter().enumerate() {
        let v = obs_op.observe(m);
        if v.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observed forecast member"));
        }
        hx.set_column(e, &DVector::from_vec(v));
    }
    // departures from the first member keep identical members exactly centered
    let centered = |m: &DMatrix<f64>| {
        let first = m.column(0).into_owned();
        let mut mean = DVector::zeros(m.nrows());
        for c in m.column_iter().skip(1) {
            mean += c - &first;
        }
        let mean = first + mean / m.ncols() as f64;
        let mut a = m.clone();
        for mut c in a.column_iter_mut() {
            c -= &mean;
        }
        a
    };
    let ha = centered(&hx);
    let a = centered(&x);
    let scale = 1.0 / (n - 1) as f64;

    let mut s = &ha * ha.transpose() * scale + r_k.to_dense();
    s = (&s + s.transpose()) * 0.5;
    let s = CovarianceModel::dense(s)?;

    let l_r = r_k.lower_factor()?;
    let mut innovation = DMatrix::zeros(p, n);
    for e in 0..n {
        let eta = &l_r * DVector::from_vec(rng::standard_normal_vec(rng, p));
        for i in 0..p {
            innovation[(i, e)] = y[i] + eta[i] - hx[(i, e)];
        }
    }
    let w = s.solve_matrix(&innovation)?;
    let coupling = ha.transpose() * &w * scale;
    let analysis = &x + &a * &coupling;
    let transform = DMatrix::identity(n, n) + coupling;
    if analysis.iter().chain(transform.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ensemble analysis"));
    }
    Ok((Ensemble::from_matrix(&analysis, forecast.time())?, transform))
}

/// Output of one smoother pass over a window.
#[derive(Debug, Clone, PartialEq)]
pub struct EnksResult {
    /// Window-start ensemble conditioned on every window observation.
    pub smoothed: Ensemble,
    pub mean: StateVector,
    pub cov: CovarianceModel,
    /// Filter ensemble propagated to the window end.
    pub forecast: Ensemble,
    pub transforms: Vec<TransformRecord>,
}

impl EnksResult {
    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let samples = RawMatrix::from_rows(self.smoothed.members())?;
        write_matrix(&dir.join("samples.bin"), &samples)?;
        let mean = RawMatrix::from_rows(&[self.mean.as_slice()])?;
        write_matrix(&dir.join("mean.bin"), &mean)?;
        write_matrix_csv(&dir.join("mean.csv"), &mean)?;
        let cov = RawMatrix::from(&self.cov.to_dense());
        write_matrix(&dir.join("cov.bin"), &cov)?;
        write_matrix_csv(&dir.join("cov.csv"), &cov)
    }
}

/// Fixed-point smoother: the running ensemble is propagated between
/// observation times and updated by the EnKF, while each transform is applied
/// to the window-start ensemble in chronological order.
pub fn enks_fixed_point<R: Rng + ?Sized>(
    initial_ens: &Ensemble,
    window: &AssimilationWindow,
    rng: &mut R,
) -> Result<EnksResult> {
    if initial_ens.len() < 2 {
        return Err(Error::InsufficientMembers(initial_ens.len()));
    }
    if initial_ens.nvar() != window.nvar() {
        return Err(Error::DimensionMismatch { expected: window.nvar(), found: initial_ens.nvar() });
    }
    let model = window.model().as_ref();
    let op = window.obs_operator().as_ref();
    let obs = window.observations();

    let mut anchor = initial_ens.to_matrix();
    let mut running = initial_ens.clone().with_time(window.t0());
    let mut transforms = Vec::with_capacity(obs.len());
    for k in 0..obs.len() {
        let t = obs.times()[k];
        running = advance_ensemble(&running, model, t)?;
        let (analysis, transform) = enkf_update(&running, &obs.values()[k], &obs.error_cov()[k], op, rng)?;
        anchor = &anchor * &transform;
        running = analysis;
        transforms.push(TransformRecord { time: t, matrix: transform });
    }
    let forecast = advance_ensemble(&running, model, window.tf())?;
    let smoothed = Ensemble::from_matrix(&anchor, window.t0())?;
    Ok(EnksResult {
        mean: ensemble_mean(&smoothed)?,
        cov: ensemble_covariance(&smoothed)?,
        smoothed,
        forecast,
        transforms,
    })
}

fn advance_ensemble(ens: &Ensemble, model: &dyn crate::model::Model, t: f64) -> Result<Ensemble> {
    if t == ens.time() {
        return Ok(ens.clone());
    }
    let members = ens.members().iter().map(|m| propagate(model, m, ens.time(), t)).collect::<Result<Vec<_>>>()?;
    Ensemble::new(members, t)
}
