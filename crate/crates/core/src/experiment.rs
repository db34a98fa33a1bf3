//! Twin experiments: configuration, validation, truth and observation
//! generation, scheme execution and run-directory persistence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::AssimilationWindow;
use crate::covariance::{ensemble_mean, sample_gaussian, CovarianceModel, Ensemble};
use crate::diagnostics::{histogram, rmse, CostBasis, CostLedger, CostReport};
use crate::enks::{enks_fixed_point, EnksResult};
use crate::error::{Error, Result};
use crate::fourdvar::{minimize, LbfgsConfig, OptimResult};
use crate::io::{fmt_f64, CsvWriter};
use crate::model::{
    generate_truth_and_observations, propagate, DoubleWell, LinearSelection, Lorenz96, Model,
    ObservationOperator, ObservationSet, StateVector, Trajectory,
};
use crate::model::QuadraticOperator;
use crate::rng::{self, Stream, GAUSSIAN_SAMPLER};
use crate::smoother::{forecast_step, run_sequential, B0Mode, InitStrategy, SmootherConfig, WindowResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    DoubleWell {
        #[serde(default = "default_double_well_step")]
        step: f64,
    },
    Lorenz96 {
        n: usize,
        forcing: f64,
        #[serde(default = "default_lorenz96_step")]
        step: f64,
    },
}

fn default_double_well_step() -> f64 {
    DoubleWell::DEFAULT_STEP
}

fn default_lorenz96_step() -> f64 {
    Lorenz96::DEFAULT_STEP
}

impl ModelSpec {
    pub fn nvar(&self) -> usize {
        match self {
            ModelSpec::DoubleWell { .. } => 1,
            ModelSpec::Lorenz96 { n, .. } => *n,
        }
    }

    pub fn step(&self) -> f64 {
        match self {
            ModelSpec::DoubleWell { step } | ModelSpec::Lorenz96 { step, .. } => *step,
        }
    }

    pub fn build(&self) -> Arc<dyn Model> {
        match self {
            ModelSpec::DoubleWell { step } => Arc::new(DoubleWell::with_step(*step)),
            ModelSpec::Lorenz96 { n, forcing, step } => Arc::new(Lorenz96::new(*n, *forcing).with_step(*step)),
        }
    }

    /// Default reference start before spin-up.
    fn rest_state(&self) -> Option<Vec<f64>> {
        match self {
            ModelSpec::DoubleWell { .. } => None,
            ModelSpec::Lorenz96 { n, forcing, .. } => {
                let mut x = vec![*forcing; *n];
                x[0] += 0.01;
                Some(x)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    HmcSmoother,
    Fourdvar,
    Enks,
    All,
}

impl Scheme {
    pub fn includes(self, other: Scheme) -> bool {
        self == Scheme::All || self == other
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::HmcSmoother => "hmc_smoother",
            Scheme::Fourdvar => "fourdvar",
            Scheme::Enks => "enks",
            Scheme::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Scheme::HmcSmoother, Scheme::Fourdvar, Scheme::Enks, Scheme::All].into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity,
    /// Component-wise square.
    Quadratic,
    /// Every `stride`-th component, starting at 0.
    Every { stride: usize },
    Indices { indices: Vec<usize> },
}

impl OperatorSpec {
    pub fn build(&self, nvar: usize) -> Result<Arc<dyn ObservationOperator>> {
        Ok(match self {
            OperatorSpec::Identity => Arc::new(LinearSelection::identity(nvar)),
            OperatorSpec::Quadratic => Arc::new(QuadraticOperator { nvar }),
            OperatorSpec::Every { stride } => {
                if *stride == 0 {
                    return Err(Error::InvalidArgument("stride must be >= 1".into()));
                }
                Arc::new(LinearSelection::every(nvar, *stride))
            }
            OperatorSpec::Indices { indices } => Arc::new(LinearSelection::new(nvar, indices.clone())?),
        })
    }
}

/// Error magnitude; exactly one of the three must be set. A relative standard
/// deviation is a fraction of the mean absolute value of the reference
/// initial state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorScale {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_std: Option<f64>,
}

impl ErrorScale {
    fn check(&self, field: &str, errors: &mut Vec<ConfigError>) {
        let set: Vec<(&str, f64)> = [("variance", self.variance), ("std", self.std), ("relative_std", self.relative_std)]
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k, v)))
            .collect();
        match set.as_slice() {
            [] => errors.push(ConfigError::new(field, "one of variance, std or relative_std is required")),
            [(k, v)] => {
                if !(*v > 0.0) || !v.is_finite() {
                    errors.push(ConfigError::new(&format!("{field}.{k}"), &format!("must be finite and > 0, got {v}")));
                }
            }
            _ => errors.push(ConfigError::new(field, "set only one of variance, std or relative_std")),
        }
    }

    /// Variance given the reference state magnitude.
    pub fn variance_for(&self, magnitude: f64) -> f64 {
        match (self.variance, self.std, self.relative_std) {
            (Some(v), _, _) => v,
            (_, Some(s), _) => s * s,
            (_, _, Some(r)) => (r * magnitude).powi(2),
            _ => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    /// Reference state before spin-up; the model's rest state when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Integration time applied to `x0` before the first window.
    #[serde(default)]
    pub spin_up: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    /// Explicit background; drawn from the perturbation scale around the
    /// reference when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Error of the first background.
    #[serde(flatten)]
    pub error: ErrorScale,
    /// Modeled B0 used by every window; the perturbation scale when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b0: Option<ErrorScale>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSpec {
    pub operator: OperatorSpec,
    #[serde(flatten)]
    pub error: ErrorScale,
    /// Multiplies the observation noise; 0 gives exact observations.
    #[serde(default = "one")]
    pub noise_scale: f64,
    /// Seed of the observation noise; the experiment seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub t0: f64,
    pub tf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_times: Option<Vec<f64>>,
    /// Observations at `t0 + k * obs_interval`, `k >= 1`, up to `tf`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_interval: Option<f64>,
}

impl WindowSpec {
    pub fn observation_times(&self) -> Vec<f64> {
        if let Some(t) = &self.obs_times {
            return t.clone();
        }
        match self.obs_interval {
            Some(dt) if dt > 0.0 => {
                let mut out = Vec::new();
                let mut k = 1;
                loop {
                    let t = self.t0 + k as f64 * dt;
                    if same_time(t, self.tf) {
                        out.push(self.tf);
                        break;
                    }
                    if t > self.tf {
                        break;
                    }
                    out.push(t);
                    k += 1;
                }
                out
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FourDVarSpec {
    /// First iterate of the first window; the background when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_init: Option<Vec<f64>>,
    pub lbfgs: LbfgsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnksSpec {
    pub n_ens: usize,
}

impl Default for EnksSpec {
    fn default() -> Self {
        Self { n_ens: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub histogram_bins: usize,
    /// Spans the pooled samples when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram_range: Option<[f64; 2]>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { histogram_bins: 40, histogram_range: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    pub model: ModelSpec,
    #[serde(default)]
    pub truth: TruthSpec,
    pub background: BackgroundSpec,
    pub observations: ObservationSpec,
    pub windows: Vec<WindowSpec>,
    /// The chain seed always follows the top-level `seed`.
    #[serde(default)]
    pub smoother: SmootherConfig,
    #[serde(default)]
    pub fourdvar: FourDVarSpec,
    #[serde(default)]
    pub enks: EnksSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/experiment")
}

fn default_scheme() -> Scheme {
    Scheme::All
}

/// One validation problem, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: &str) -> Self {
        Self { field: field.to_string(), message: message.to_string() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Parses and validates a TOML configuration, reporting every problem found.
pub fn validate_config(raw: &str) -> std::result::Result<ExperimentConfig, Vec<ConfigError>> {
    let cfg: ExperimentConfig = toml::from_str(raw).map_err(|e| {
        let msg = e.message().to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.contains("missing field") || msg.contains("unknown field"))
            .unwrap_or("config")
            .to_string();
        vec![ConfigError { field, message: msg.trim().to_string() }]
    })?;
    let errors = cfg.validate();
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

fn aligned(step: f64, t0: f64, t1: f64) -> bool {
    let n = (t1 - t0) / step;
    (n - n.round()).abs() <= 1e-6
}

impl ExperimentConfig {
    pub fn from_toml(raw: &str) -> std::result::Result<Self, Vec<ConfigError>> {
        validate_config(raw)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Every semantic problem with the configuration.
    pub fn validate(&self) -> Vec<ConfigError> {
        let mut errors = Vec::new();
        let mut err = |field: &str, msg: String| errors.push(ConfigError::new(field, &msg));
        let step = self.model.step();
        match &self.model {
            ModelSpec::DoubleWell { step } => {
                if !(*step > 0.0) {
                    err("model.step", format!("must be > 0, got {step}"));
                }
            }
            ModelSpec::Lorenz96 { n, forcing, step } => {
                if *n < 4 {
                    err("model.n", format!("needs at least 4 variables, got {n}"));
                }
                if !forcing.is_finite() {
                    err("model.forcing", "must be finite".into());
                }
                if !(*step > 0.0) {
                    err("model.step", format!("must be > 0, got {step}"));
                }
            }
        }
        let nvar = self.model.nvar();
        let step_ok = step > 0.0;

        match &self.truth.x0 {
            Some(x) if x.len() != nvar => err("truth.x0", format!("expected {nvar} entries, got {}", x.len())),
            Some(x) if x.iter().any(|v| !v.is_finite()) => err("truth.x0", "entries must be finite".into()),
            None if self.model.rest_state().is_none() => err("truth.x0", "required for this model".into()),
            _ => {}
        }
        if !(self.truth.spin_up >= 0.0) {
            err("truth.spin_up", format!("must be >= 0, got {}", self.truth.spin_up));
        } else if step_ok && !aligned(step, 0.0, self.truth.spin_up) {
            err("truth.spin_up", format!("{} is not a multiple of the model step {step}", self.truth.spin_up));
        }

        if let Some(x) = &self.background.x0 {
            if x.len() != nvar {
                err("background.x0", format!("expected {nvar} entries, got {}", x.len()));
            }
        }
        if let Some(x) = &self.fourdvar.x_init {
            if x.len() != nvar {
                err("fourdvar.x_init", format!("expected {nvar} entries, got {}", x.len()));
            }
        }
        let mut scale_errors = Vec::new();
        self.background.error.check("background", &mut scale_errors);
        if let Some(b0) = &self.background.b0 {
            b0.check("background.b0", &mut scale_errors);
        }
        self.observations.error.check("observations", &mut scale_errors);
        if !(self.observations.noise_scale >= 0.0) {
            err("observations.noise_scale", format!("must be >= 0, got {}", self.observations.noise_scale));
        }
        if let Err(e) = self.observations.operator.build(nvar) {
            err("observations.operator", e.to_string());
        }

        if self.windows.is_empty() {
            err("windows", "at least one window is required".into());
        }
        let mut last_obs = f64::NEG_INFINITY;
        for (i, w) in self.windows.iter().enumerate() {
            if !(w.t0 < w.tf) || !w.t0.is_finite() || !w.tf.is_finite() {
                err(&format!("windows[{i}].t0"), format!("t0 = {} must be before tF = {}", w.t0, w.tf));
                continue;
            }
            if step_ok && !aligned(step, w.t0, w.tf) {
                err(&format!("windows[{i}].tf"), format!("window length is not a multiple of the model step {step}"));
            }
            if i > 0 {
                let prev = self.windows[i - 1].tf;
                if (prev - w.t0).abs() > 1e-9 * prev.abs().max(1.0) {
                    err(&format!("windows[{i}].t0"), format!("t0 = {} does not continue the previous window ending at {prev}", w.t0));
                }
            }
            if w.obs_times.is_some() && w.obs_interval.is_some() {
                err(&format!("windows[{i}].obs_times"), "set only one of obs_times or obs_interval".into());
            }
            if let Some(dt) = w.obs_interval {
                if !(dt > 0.0) {
                    err(&format!("windows[{i}].obs_interval"), format!("must be > 0, got {dt}"));
                    continue;
                }
            }
            for t in w.observation_times() {
                let tol = 1e-9 * t.abs().max(1.0);
                if t < w.t0 - tol || t > w.tf + tol {
                    err(&format!("windows[{i}].obs_times"), format!("{t} lies outside [{}, {}]", w.t0, w.tf));
                } else if step_ok && !aligned(step, w.t0, t) {
                    err(&format!("windows[{i}].obs_times"), format!("{t} is not on the model time grid"));
                } else if t <= last_obs {
                    err(&format!("windows[{i}].obs_times"), format!("{t} is not strictly after the previous observation"));
                }
                last_obs = last_obs.max(t);
            }
        }

        let s = &self.smoother;
        let h = &s.hmc;
        if h.trajectory_steps == 0 {
            err("smoother.hmc.trajectory_steps", "must be >= 1".into());
        }
        if !(h.base_step > 0.0) || !h.base_step.is_finite() {
            err("smoother.hmc.base_step", format!("must be > 0, got {}", h.base_step));
        }
        if !(0.0..1.0).contains(&h.step_jitter) {
            err("smoother.hmc.step_jitter", format!("must lie in [0, 1), got {}", h.step_jitter));
        }
        if h.n_samples < 2 {
            err("smoother.hmc.n_samples", format!("need at least 2 samples, got {}", h.n_samples));
        }
        if let B0Mode::Hybrid { gamma } = s.b0_mode {
            if !(0.0..=1.0).contains(&gamma) {
                err("smoother.b0_mode.gamma", format!("gamma = {gamma} must lie in [0, 1]"));
            }
        }
        if let InitStrategy::FourdvarWarmStart { max_iter } = s.init_strategy {
            if max_iter == 0 {
                err("smoother.init_strategy.max_iter", "must be >= 1".into());
            }
        }
        if let Some(t) = &s.taper {
            if t.validate().is_err() {
                err("smoother.taper.decorrelation_length", format!("must be > 0, got {}", t.decorrelation_length));
            }
        }
        if let Err(e) = self.fourdvar.lbfgs.validate() {
            err("fourdvar.lbfgs", e.to_string());
        }
        if self.enks.n_ens < 2 {
            err("enks.n_ens", format!("need at least 2 members, got {}", self.enks.n_ens));
        }
        if self.output.histogram_bins == 0 {
            err("output.histogram_bins", "must be >= 1".into());
        }
        if let Some([lo, hi]) = self.output.histogram_range {
            if !(lo < hi) {
                err("output.histogram_range", format!("[{lo}, {hi}] is empty"));
            }
        }
        errors.extend(scale_errors);
        errors
    }
}

/// Everything derived from a configuration before any scheme runs.
pub struct Scenario {
    pub model: Arc<dyn Model>,
    pub obs_operator: Arc<dyn ObservationOperator>,
    pub truth_x0: StateVector,
    pub background: StateVector,
    pub b0: Arc<CovarianceModel>,
    pub windows: Vec<AssimilationWindow>,
    /// Reference states at every report time and observation time.
    pub truth: Trajectory,
    /// Report rows: window index and time.
    pub rows: Vec<(usize, f64)>,
}

impl Scenario {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let errors = cfg.validate();
        if !errors.is_empty() {
            return Err(Error::InvalidArgument(
                errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            ));
        }
        let model = cfg.model.build();
        let nvar = cfg.model.nvar();
        let op = cfg.observations.operator.build(nvar)?;
        let start = cfg.truth.x0.clone().or_else(|| cfg.model.rest_state()).ok_or(Error::InvalidArgument(
            "truth.x0 is required".into(),
        ))?;
        let truth_x0 = propagate(model.as_ref(), &StateVector::new(start)?, 0.0, cfg.truth.spin_up)?;
        let magnitude = truth_x0.iter().map(|v| v.abs()).sum::<f64>() / nvar as f64;

        let perturbation = CovarianceModel::diagonal(vec![cfg.background.error.variance_for(magnitude); nvar])?;
        let b0 = Arc::new(match &cfg.background.b0 {
            Some(scale) => CovarianceModel::diagonal(vec![scale.variance_for(magnitude); nvar])?,
            None => perturbation.clone(),
        });
        let background = match &cfg.background.x0 {
            Some(x) => StateVector::new(x.clone())?,
            None => {
                let mut g = rng::stream(cfg.seed, Stream::Background);
                sample_gaussian(&truth_x0, &perturbation, 1, 0.0, &mut g)?.into_members().remove(0)
            }
        };

        let t_start = cfg.windows[0].t0;
        let per_window: Vec<Vec<f64>> = cfg.windows.iter().map(WindowSpec::observation_times).collect();
        let all_obs: Vec<f64> = per_window.iter().flatten().copied().collect();
        let o_std = cfg.observations.error.variance_for(magnitude).sqrt();
        let noise_seed = cfg.observations.noise_seed.unwrap_or(cfg.seed);
        let (_, obs) = generate_truth_and_observations(
            model.as_ref(),
            op.as_ref(),
            &truth_x0,
            t_start,
            &all_obs,
            &vec![o_std; op.obs_dim()],
            cfg.observations.noise_scale,
            noise_seed,
        )?;

        let mut windows = Vec::with_capacity(cfg.windows.len());
        let mut rows = Vec::new();
        let mut offset = 0;
        for (i, (spec, times)) in cfg.windows.iter().zip(&per_window).enumerate() {
            let k = offset..offset + times.len();
            offset += times.len();
            let set = ObservationSet::new(
                obs.times()[k.clone()].to_vec(),
                obs.values()[k.clone()].to_vec(),
                obs.error_cov()[k].to_vec(),
            )?;
            windows.push(AssimilationWindow::new(
                spec.t0,
                spec.tf,
                background.clone(),
                b0.clone(),
                set,
                model.clone(),
                op.clone(),
            )?);
            rows.push((i, spec.t0));
            let last = i + 1 == cfg.windows.len();
            for &t in times {
                if t > spec.t0 && (t < spec.tf - 1e-9 * spec.tf.abs().max(1.0) || last) {
                    rows.push((i, t));
                }
            }
            if last && rows.last().map(|r| r.1) != Some(spec.tf) && !times.iter().any(|&t| same_time(t, spec.tf)) {
                rows.push((i, spec.tf));
            }
        }

        let mut sample_times: Vec<f64> = rows.iter().map(|r| r.1).chain(all_obs.iter().copied()).collect();
        sample_times.sort_by(f64::total_cmp);
        sample_times.dedup_by(|a, b| same_time(*a, *b));
        if sample_times[0] > t_start {
            sample_times.insert(0, t_start);
        }
        let truth = Trajectory::sample(model.as_ref(), &truth_x0, &sample_times)?;
        Ok(Self { model, obs_operator: op, truth_x0, background, b0, windows, truth, rows })
    }

    /// Reference state at `t`.
    pub fn truth_at(&self, t: f64) -> Result<&StateVector> {
        self.truth
            .times
            .iter()
            .position(|&s| same_time(s, t))
            .map(|i| &self.truth.states[i])
            .ok_or(Error::InvalidArgument(format!("no reference state at t = {t}")))
    }
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

pub struct FourDVarWindow {
    pub background: StateVector,
    pub result: OptimResult,
    pub cost: CostLedger,
}

pub struct EnksWindow {
    pub initial: Ensemble,
    pub result: EnksResult,
}

/// RMSE time series, one column per estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseTable {
    pub rows: Vec<(usize, f64)>,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl RmseTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["window", "time"];
        header.extend(self.columns.iter().map(|(n, _)| n.as_str()));
        let mut w = CsvWriter::create(path, &header)?;
        for (r, (win, t)) in self.rows.iter().enumerate() {
            let mut cells = vec![win.to_string(), fmt_f64(*t)];
            cells.extend(self.columns.iter().map(|(_, v)| fmt_f64(v[r])));
            w.row(&cells)?;
        }
        w.finish()
    }
}

pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub scenario: Scenario,
    pub hmc: Option<Vec<WindowResult>>,
    pub fourdvar: Option<Vec<FourDVarWindow>>,
    pub enks: Option<Vec<EnksWindow>>,
    pub rmse: RmseTable,
    pub cost: CostReport,
}

#[derive(Serialize)]
struct Manifest<'a> {
    status: &'a str,
    seed: u64,
    version: &'a str,
    timestamp_unix: u64,
    scheme: &'a str,
    windows: usize,
    gaussian_sampler: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn write_manifest(dir: &Path, cfg: &ExperimentConfig, error: Option<String>) -> Result<()> {
    let manifest = Manifest {
        status: if error.is_some() { "failed" } else { "ok" },
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        timestamp_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        scheme: cfg.scheme.name(),
        windows: cfg.windows.len(),
        gaussian_sampler: GAUSSIAN_SAMPLER,
        error,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

/// Runs every configured scheme and writes the run directory. On failure the
/// outputs written so far are kept and the manifest records the error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    match run_inner(cfg, &dir) {
        Ok(outcome) => {
            write_manifest(&dir, cfg, None)?;
            Ok(outcome)
        }
        Err(e) => {
            write_manifest(&dir, cfg, Some(e.to_string()))?;
            Err(e)
        }
    }
}

fn window_dir(dir: &Path, scheme: Scheme, i: usize) -> PathBuf {
    dir.join(scheme.name()).join(format!("window_{i:02}"))
}

fn write_states_csv(path: &Path, times: &[f64], states: &[&StateVector]) -> Result<()> {
    let n = states.first().map_or(0, |s| s.len());
    let names: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    let mut header = vec!["time"];
    header.extend(names.iter().map(String::as_str));
    let mut w = CsvWriter::create(path, &header)?;
    for (t, s) in times.iter().zip(states) {
        let mut row = vec![*t];
        row.extend(s.iter());
        w.float_row(&row)?;
    }
    w.finish()
}

/// Mean of the ensemble propagated to each row time of window `i`.
fn ensemble_rmse(sc: &Scenario, i: usize, ens: &Ensemble, out: &mut Vec<f64>) -> Result<()> {
    let mut current = ens.clone();
    for &(w, t) in sc.rows.iter().filter(|r| r.0 == i) {
        debug_assert_eq!(w, i);
        if !same_time(t, current.time()) {
            current = forecast_step(&current, sc.model.as_ref(), current.time(), t)?;
        }
        out.push(rmse(&ensemble_mean(&current)?, sc.truth_at(t)?)?);
    }
    Ok(())
}

fn state_rmse(sc: &Scenario, i: usize, x0: &StateVector, t0: f64, out: &mut Vec<f64>) -> Result<()> {
    let mut x = x0.clone();
    let mut t_cur = t0;
    for &(_, t) in sc.rows.iter().filter(|r| r.0 == i) {
        x = propagate(sc.model.as_ref(), &x, t_cur, t)?;
        t_cur = t;
        out.push(rmse(&x, sc.truth_at(t)?)?);
    }
    Ok(())
}

fn run_inner(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    let sc = Scenario::build(cfg)?;
    let nvar = sc.model.nvar();

    let truth_rows: Vec<&StateVector> = sc.truth.states.iter().collect();
    write_states_csv(&dir.join("truth.csv"), &sc.truth.times, &truth_rows)?;
    {
        let obs_dim = sc.obs_operator.obs_dim();
        let names: Vec<String> = (0..obs_dim).map(|i| format!("y{i}")).collect();
        let mut header = vec!["window", "time"];
        header.extend(names.iter().map(String::as_str));
        let mut w = CsvWriter::create(&dir.join("observations.csv"), &header)?;
        for (i, win) in sc.windows.iter().enumerate() {
            let o = win.observations();
            for (t, y) in o.times().iter().zip(o.values()) {
                let mut cells = vec![i.to_string(), fmt_f64(*t)];
                cells.extend(y.iter().map(|v| fmt_f64(*v)));
                w.row(&cells)?;
            }
        }
        w.finish()?;
    }

    let mut columns = Vec::new();
    let mut free = Vec::new();
    {
        let mut x = sc.background.clone();
        let mut t_cur = sc.windows[0].t0();
        for &(_, t) in &sc.rows {
            x = propagate(sc.model.as_ref(), &x, t_cur, t)?;
            t_cur = t;
            free.push(rmse(&x, sc.truth_at(t)?)?);
        }
    }
    columns.push(("free_run".to_string(), free));
    let mut report = CostReport::default();

    let hmc = if cfg.scheme.includes(Scheme::HmcSmoother) {
        log::info!("running the HMC sampling smoother over {} window(s)", sc.windows.len());
        let mut scfg = cfg.smoother.clone();
        scfg.hmc.seed = cfg.seed;
        let results = run_sequential(&sc.windows, &scfg)?;
        let mut col = Vec::new();
        let mut measured = CostLedger::new(0, 0);
        let mut proposals = 0u64;
        for (i, r) in results.iter().enumerate() {
            r.persist(&window_dir(dir, Scheme::HmcSmoother, i), &scfg)?;
            ensemble_rmse(&sc, i, &r.analysis_ensemble, &mut col)?;
            measured = measured.merged(&r.cost)?;
            proposals += r.chain.proposals_total as u64;
        }
        columns.push((Scheme::HmcSmoother.name().to_string(), col));
        report.push(Scheme::HmcSmoother.name(), CostBasis::Measured, proposals, measured);
        report.push(Scheme::HmcSmoother.name(), CostBasis::Nominal, proposals, CostLedger::hmc_nominal(proposals));
        Some(results)
    } else {
        None
    };

    let fourdvar = if cfg.scheme.includes(Scheme::Fourdvar) {
        log::info!("running 4D-Var over {} window(s)", sc.windows.len());
        let mut out: Vec<FourDVarWindow> = Vec::new();
        let mut col = Vec::new();
        let mut xb = sc.background.clone();
        for (i, base) in sc.windows.iter().enumerate() {
            let win = base.with_background(xb.clone())?.with_fresh_counters();
            let x_init = match (&cfg.fourdvar.x_init, i) {
                (Some(x), 0) => StateVector::new(x.clone())?,
                _ => xb.clone(),
            };
            let result = minimize(&win, &x_init, &cfg.fourdvar.lbfgs)?;
            let wd = window_dir(dir, Scheme::Fourdvar, i);
            std::fs::create_dir_all(&wd)?;
            result.write_log(&wd.join("iterations.csv"))?;
            write_states_csv(&wd.join("analysis.csv"), &[win.t0()], &[&result.analysis])?;
            state_rmse(&sc, i, &result.analysis, win.t0(), &mut col)?;
            let next = propagate(sc.model.as_ref(), &result.analysis, win.t0(), win.tf())?;
            out.push(FourDVarWindow { background: xb, cost: CostLedger::from_counters(win.counters()), result });
            xb = next;
        }
        columns.push((Scheme::Fourdvar.name().to_string(), col));
        let iterations: u64 = out.iter().map(|w| w.result.iterations as u64).sum();
        let evals: u64 = out.iter().map(|w| w.result.function_evaluations as u64).sum();
        let mut measured = CostLedger::new(0, 0);
        for w in &out {
            measured = measured.merged(&w.cost)?;
        }
        report.push(Scheme::Fourdvar.name(), CostBasis::Measured, iterations, measured);
        report.push(Scheme::Fourdvar.name(), CostBasis::Nominal, iterations, CostLedger::fourdvar_nominal(evals, iterations));
        Some(out)
    } else {
        None
    };

    let enks = if cfg.scheme.includes(Scheme::Enks) {
        log::info!("running the EnKS with {} members", cfg.enks.n_ens);
        let mut g = rng::stream(cfg.seed, Stream::EnsembleInit);
        let mut u = rng::stream(cfg.seed, Stream::ObservationPerturbation);
        let mut ens = sample_gaussian(&sc.background, &sc.b0, cfg.enks.n_ens, sc.windows[0].t0(), &mut g)?;
        let mut out = Vec::new();
        let mut col = Vec::new();
        let mut forward = 0u64;
        let mut updates = 0u64;
        for (i, win) in sc.windows.iter().enumerate() {
            let result = enks_fixed_point(&ens, win, &mut u)?;
            result.persist(&window_dir(dir, Scheme::Enks, i))?;
            ensemble_rmse(&sc, i, &result.smoothed, &mut col)?;
            forward += ens.len() as u64;
            updates += result.transforms.len() as u64;
            let next = result.forecast.clone();
            out.push(EnksWindow { initial: ens, result });
            ens = next;
        }
        columns.push((Scheme::Enks.name().to_string(), col));
        report.push(Scheme::Enks.name(), CostBasis::Measured, updates, CostLedger::new(forward, 0));
        Some(out)
    } else {
        None
    };

    let table = RmseTable { rows: sc.rows.clone(), columns };
    table.write_csv(&dir.join("rmse.csv"))?;
    report.write_csv(&dir.join("cost.csv"))?;
    report.write_text(&dir.join("cost.txt"))?;

    if nvar == 1 {
        let mut sets: Vec<(&str, Vec<f64>)> = Vec::new();
        if let Some(h) = &hmc {
            sets.push((Scheme::HmcSmoother.name(), h[0].analysis_ensemble.members().iter().map(|m| m[0]).collect()));
        }
        if let Some(e) = &enks {
            sets.push((Scheme::Enks.name(), e[0].result.smoothed.members().iter().map(|m| m[0]).collect()));
        }
        if !sets.is_empty() {
            let [lo, hi] = cfg.output.histogram_range.unwrap_or_else(|| {
                let all = sets.iter().flat_map(|s| s.1.iter().copied());
                let lo = all.clone().fold(f64::INFINITY, f64::min);
                let hi = all.fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    [lo, hi]
                } else {
                    [lo - 0.5, lo + 0.5]
                }
            });
            let hists = sets
                .iter()
                .map(|(_, v)| histogram(v, lo, hi, cfg.output.histogram_bins))
                .collect::<Result<Vec<_>>>()?;
            let mut header = vec!["bin_lo", "bin_hi"];
            header.extend(sets.iter().map(|s| s.0));
            let mut w = CsvWriter::create(&dir.join("histogram.csv"), &header)?;
            for b in 0..cfg.output.histogram_bins {
                let mut cells = vec![fmt_f64(hists[0].edges[b]), fmt_f64(hists[0].edges[b + 1])];
                cells.extend(hists.iter().map(|h| h.counts[b].to_string()));
                w.row(&cells)?;
            }
            w.finish()?;
        }
    }

    Ok(ExperimentOutcome { run_dir: dir.to_path_buf(), scenario: sc, hmc, fourdvar, enks, rmse: table, cost: report })
}

/// Preset shipped with the crate.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "double_well" => Some(include_str!("../presets/double_well.toml")),
        "lorenz96" => Some(include_str!("../presets/lorenz96.toml")),
        _ => None,
    }
}

pub const PRESETS: [&str; 2] = ["double_well", "lorenz96"];
