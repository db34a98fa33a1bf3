//! Four-dimensional data assimilation toolkit.
//!
//! The centrepiece is a sampling smoother that draws the posterior of a
//! dynamical system's initial condition with Hamiltonian Monte-Carlo, using
//! the strong-constraint 4D-Var cost as the potential energy. A 4D-Var solver
//! (in-repo L-BFGS) and a stochastic ensemble Kalman smoother are provided as
//! baselines, together with the double-well and Lorenz-96 test models and a
//! twin-experiment runner.

// `!(x > 0.0)` deliberately also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod covariance;
pub mod diagnostics;
pub mod enks;
pub mod error;
pub mod experiment;
pub mod fourdvar;
pub mod hmc;
pub mod io;
pub mod model;
pub mod rng;
pub mod smoother;

pub use cost::{AssimilationWindow, Objective, RunCounters};
pub use covariance::{CovarianceModel, Ensemble, TaperSpec};
pub use error::{Error, Result};
pub use model::{DoubleWell, Lorenz96, Model, ObservationOperator, ObservationSet, StateVector};
