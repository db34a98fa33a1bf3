//! Hamiltonian Monte-Carlo over a potential `J(x)` with diagonal mass matrix,
//! position-Verlet trajectories and Metropolis acceptance on the energy error.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::Objective;
use crate::covariance::Ensemble;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, CsvWriter};
use crate::model::StateVector;
use crate::rng::{self, Stream, GAUSSIAN_SAMPLER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    /// Verlet steps per trajectory (`m`).
    pub trajectory_steps: usize,
    /// Nominal step `h*`; the trajectory length is `m * h*`.
    pub base_step: f64,
    /// Relative half-width of the uniform per-trajectory step perturbation.
    pub step_jitter: f64,
    pub burn_in: usize,
    /// States dropped between kept samples.
    pub thin: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            trajectory_steps: 10,
            base_step: 0.01,
            step_jitter: 0.2,
            burn_in: 20,
            thin: 4,
            n_samples: 100,
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn trajectory_length(&self) -> f64 {
        self.trajectory_steps as f64 * self.base_step
    }

    pub fn proposals_total(&self) -> usize {
        self.burn_in + self.n_samples * (self.thin + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectory_steps == 0 {
            return Err(Error::InvalidArgument("trajectory_steps must be >= 1".into()));
        }
        if !(self.base_step > 0.0) || !self.base_step.is_finite() {
            return Err(Error::InvalidArgument(format!("base_step {} must be > 0", self.base_step)));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(Error::InvalidArgument(format!("step_jitter {} outside [0, 1)", self.step_jitter)));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Suggested Verlet step for `nvar` dimensions, scaling a step tuned in one
/// dimension by `nvar^{-1/4}`.
pub fn suggest_step_size(reference_step: f64, nvar: usize) -> f64 {
    reference_step * (1.0 / nvar.max(1) as f64).powf(0.25)
}

/// Diagonal mass matrix; entries are precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMatrix {
    diagonal: Vec<f64>,
}

impl MassMatrix {
    pub fn new(diagonal: Vec<f64>) -> Result<Self> {
        if diagonal.is_empty() || diagonal.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return Err(Error::InvalidArgument("mass matrix entries must be finite and > 0".into()));
        }
        Ok(Self { diagonal })
    }

    pub fn identity(n: usize) -> Self {
        Self { diagonal: vec![1.0; n] }
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    pub fn dim(&self) -> usize {
        self.diagonal.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
}

/// `½ pᵀ M⁻¹ p`
pub fn kinetic_energy(p: &[f64], mass: &MassMatrix) -> f64 {
    0.5 * p.iter().zip(&mass.diagonal).map(|(p, m)| p * p / m).sum::<f64>()
}

/// Total energy `½ pᵀ M⁻¹ p + J(x)`.
pub fn hamiltonian<O: Objective + ?Sized>(phase: &PhasePoint, mass: &MassMatrix, potential: &O) -> Result<f64> {
    if phase.position.len() != phase.momentum.len() || phase.momentum.len() != mass.dim() {
        return Err(Error::DimensionMismatch { expected: mass.dim(), found: phase.momentum.len() });
    }
    Ok(kinetic_energy(&phase.momentum, mass) + potential.value(&phase.position)?)
}

/// `m` position-Verlet steps of size `h`; exactly `m` gradient evaluations.
pub fn verlet_trajectory<O: Objective + ?Sized>(
    start: &PhasePoint,
    mass: &MassMatrix,
    potential: &O,
    h: f64,
    m: usize,
) -> Result<PhasePoint> {
    if !(h > 0.0) || m == 0 {
        return Err(Error::InvalidArgument(format!("Verlet needs h > 0 and m >= 1, got h={h} m={m}")));
    }
    let minv: Vec<f64> = mass.diagonal.iter().map(|v| 1.0 / v).collect();
    let mut x = start.position.clone();
    let mut p = start.momentum.clone();
    for _ in 0..m {
        for i in 0..x.len() {
            x[i] += 0.5 * h * minv[i] * p[i];
        }
        let g = potential.gradient(&x).map_err(|_| Error::Diverged)?;
        for i in 0..x.len() {
            p[i] -= h * g[i];
            x[i] += 0.5 * h * minv[i] * p[i];
        }
        if x.iter().chain(&p).any(|v| !v.is_finite()) {
            return Err(Error::Diverged);
        }
    }
    Ok(PhasePoint { position: x, momentum: p })
}

/// Randomness consumed by one HMC transition.
pub trait HmcRandom {
    /// Standard normal draw for the momentum.
    fn standard_normal(&mut self) -> f64;
    /// Uniform on `[0, 1)` for the step perturbation.
    fn jitter_uniform(&mut self) -> f64;
    /// Uniform on `[0, 1)` for the accept/reject decision.
    fn acceptance_uniform(&mut self) -> f64;
}

/// Three independent seeded ChaCha8 streams.
#[derive(Debug, Clone)]
pub struct StreamRng {
    momentum: ChaCha8Rng,
    jitter: ChaCha8Rng,
    acceptance: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        Self {
            momentum: rng::stream(seed, Stream::Momentum),
            jitter: rng::stream(seed, Stream::StepJitter),
            acceptance: rng::stream(seed, Stream::Acceptance),
        }
    }
}

impl HmcRandom for StreamRng {
    fn standard_normal(&mut self) -> f64 {
        rng::standard_normal(&mut self.momentum)
    }

    fn jitter_uniform(&mut self) -> f64 {
        self.jitter.random::<f64>()
    }

    fn acceptance_uniform(&mut self) -> f64 {
        self.acceptance.random::<f64>()
    }
}

/// Position plus its cached potential energy.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub position: Vec<f64>,
    pub potential: f64,
}

impl ChainState {
    pub fn new<O: Objective + ?Sized>(potential: &O, position: Vec<f64>) -> Result<Self> {
        let value = potential.value(&position)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("initial potential"));
        }
        Ok(Self { position, potential: value })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyEntry {
    pub h_current: f64,
    pub h_proposal: f64,
    pub delta_h: f64,
    pub accepted: bool,
    pub kept: bool,
    pub step_size: f64,
}

/// Acceptance probability `min(1, exp(-dH))`; 0 for a non-finite energy error.
pub fn acceptance_probability(delta_h: f64) -> f64 {
    if delta_h.is_nan() || delta_h == f64::INFINITY {
        0.0
    } else if delta_h <= 0.0 {
        1.0
    } else {
        (-delta_h).exp()
    }
}

/// One HMC transition: fresh momentum, one jittered Verlet trajectory,
/// Metropolis test on the energy error. A diverged trajectory is a rejection
/// with `dH = +inf`.
pub fn hmc_step<O: Objective + ?Sized, R: HmcRandom + ?Sized>(
    current: &ChainState,
    mass: &MassMatrix,
    potential: &O,
    cfg: &HmcConfig,
    rng: &mut R,
) -> (ChainState, EnergyEntry) {
    let momentum: Vec<f64> =
        mass.diagonal.iter().map(|m| m.sqrt() * rng.standard_normal()).collect();
    let r = cfg.step_jitter * (2.0 * rng.jitter_uniform() - 1.0);
    let h = (1.0 + r) * cfg.base_step;
    let h_current = kinetic_energy(&momentum, mass) + current.potential;
    let start = PhasePoint { position: current.position.clone(), momentum };

    let proposal = verlet_trajectory(&start, mass, potential, h, cfg.trajectory_steps).and_then(|end| {
        let j = potential.value(&end.position)?;
        if j.is_finite() {
            Ok((end, j))
        } else {
            Err(Error::Diverged)
        }
    });
    let (h_proposal, candidate) = match proposal {
        Ok((end, j)) => (kinetic_energy(&end.momentum, mass) + j, Some((end.position, j))),
        Err(_) => (f64::INFINITY, None),
    };
    let delta_h = if h_proposal.is_finite() { h_proposal - h_current } else { f64::INFINITY };
    let a = acceptance_probability(delta_h);
    let u = rng.acceptance_uniform();
    let accepted = candidate.is_some() && a > u;
    let next = match (accepted, candidate) {
        (true, Some((position, potential))) => ChainState { position, potential },
        _ => current.clone(),
    };
    let entry = EnergyEntry { h_current, h_proposal, delta_h, accepted, kept: false, step_size: h };
    (next, entry)
}

/// Trace of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub samples: Ensemble,
    pub proposals_total: usize,
    pub accepted_total: usize,
    pub energy_trace: Vec<EnergyEntry>,
    pub seed: u64,
    pub gaussian_sampler: &'static str,
}

impl ChainRecord {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals_total == 0 {
            0.0
        } else {
            self.accepted_total as f64 / self.proposals_total as f64
        }
    }

    /// One row per proposal: `index,delta_h,accept,kept`.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = CsvWriter::create(path, &["index", "delta_h", "accept", "kept"])?;
        for (i, e) in self.energy_trace.iter().enumerate() {
            w.row(&[
                i.to_string(),
                fmt_f64(e.delta_h),
                u8::from(e.accepted).to_string(),
                u8::from(e.kept).to_string(),
            ])?;
        }
        w.finish()
    }
}

/// Runs `burn_in` transitions, then keeps every `(thin + 1)`-th state until
/// `n_samples` are collected.
pub fn run_chain<O: Objective + ?Sized>(
    x_init: &StateVector,
    mass: &MassMatrix,
    potential: &O,
    cfg: &HmcConfig,
) -> Result<ChainRecord> {
    let mut rng = StreamRng::new(cfg.seed);
    run_chain_with(x_init, mass, potential, cfg, &mut rng)
}

pub fn run_chain_with<O: Objective + ?Sized, R: HmcRandom + ?Sized>(
    x_init: &StateVector,
    mass: &MassMatrix,
    potential: &O,
    cfg: &HmcConfig,
    rng: &mut R,
) -> Result<ChainRecord> {
    cfg.validate()?;
    if x_init.len() != mass.dim() || x_init.len() != potential.dim() {
        return Err(Error::DimensionMismatch { expected: mass.dim(), found: x_init.len() });
    }
    let mut state = ChainState::new(potential, x_init.to_vec())?;
    let total = cfg.proposals_total();
    let mut trace = Vec::with_capacity(total);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut accepted = 0;
    for k in 0..total {
        let (next, mut entry) = hmc_step(&state, mass, potential, cfg, rng);
        state = next;
        accepted += usize::from(entry.accepted);
        if k >= cfg.burn_in && (k - cfg.burn_in) % (cfg.thin + 1) == cfg.thin {
            entry.kept = true;
            samples.push(StateVector::new(state.position.clone())?);
        }
        trace.push(entry);
    }
    Ok(ChainRecord {
        samples: Ensemble::new(samples, 0.0)?,
        proposals_total: total,
        accepted_total: accepted,
        energy_trace: trace,
        seed: cfg.seed,
        gaussian_sampler: GAUSSIAN_SAMPLER,
    })
}
