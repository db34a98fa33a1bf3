//! Sequential HMC sampling smoother: each window's initial condition is
//! sampled from its posterior, the samples are forecast to the next window,
//! and their statistics feed the next background.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::AssimilationWindow;
use crate::covariance::{apply_taper, ensemble_covariance, ensemble_mean, hybrid_update, CovarianceModel, Ensemble, TaperSpec};
use crate::diagnostics::CostLedger;
use crate::error::{Error, Result};
use crate::fourdvar::{minimize, LbfgsConfig};
use crate::hmc::{run_chain, ChainRecord, HmcConfig, MassMatrix};
use crate::io::{write_matrix, write_matrix_csv, RawMatrix};
use crate::model::{propagate, Model, StateVector};
use crate::rng::{sub_seed, GAUSSIAN_SAMPLER};

/// Background covariance used by each window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum B0Mode {
    Fixed,
    /// `gamma * B_modeled + (1 - gamma) * B_ensemble`.
    Hybrid { gamma: f64 },
}

/// Starting point of each chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitStrategy {
    Background,
    /// A few L-BFGS iterations from the background.
    FourdvarWarmStart { max_iter: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmootherConfig {
    pub hmc: HmcConfig,
    pub b0_mode: B0Mode,
    pub init_strategy: InitStrategy,
    /// Applied to the ensemble covariance before blending.
    pub taper: Option<TaperSpec>,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self { hmc: HmcConfig::default(), b0_mode: B0Mode::Fixed, init_strategy: InitStrategy::Background, taper: None }
    }
}

impl SmootherConfig {
    pub fn validate(&self) -> Result<()> {
        self.hmc.validate()?;
        if let B0Mode::Hybrid { gamma } = self.b0_mode {
            if !(0.0..=1.0).contains(&gamma) {
                return Err(Error::InvalidWeight(gamma));
            }
        }
        if let InitStrategy::FourdvarWarmStart { max_iter } = self.init_strategy {
            if max_iter == 0 {
                return Err(Error::InvalidArgument("warm start needs max_iter >= 1".into()));
            }
        }
        if let Some(t) = &self.taper {
            t.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowResult {
    pub t0: f64,
    pub tf: f64,
    pub background: StateVector,
    pub b0: Arc<CovarianceModel>,
    pub chain_start: StateVector,
    pub analysis_ensemble: Ensemble,
    pub analysis_mean: StateVector,
    pub analysis_cov: CovarianceModel,
    pub forecast_ensemble: Ensemble,
    pub chain: ChainRecord,
    /// Model runs spent on the analysis, warm start included.
    pub cost: CostLedger,
}

#[derive(Serialize)]
struct WindowManifest<'a> {
    t0: f64,
    tf: f64,
    seed: u64,
    gaussian_sampler: &'a str,
    proposals_total: usize,
    accepted_total: usize,
    acceptance_rate: f64,
    n_samples: usize,
    forecast_members: usize,
    forward_runs: u64,
    adjoint_runs: u64,
    config: &'a SmootherConfig,
}

impl WindowResult {
    /// Writes samples, mean, covariance, forecast, chain trace and a manifest
    /// into `dir`.
    pub fn persist(&self, dir: &Path, cfg: &SmootherConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_matrix(&dir.join("samples.bin"), &RawMatrix::from_rows(self.analysis_ensemble.members())?)?;
        write_matrix(&dir.join("forecast.bin"), &RawMatrix::from_rows(self.forecast_ensemble.members())?)?;
        let mean = RawMatrix::from_rows(&[self.analysis_mean.as_slice()])?;
        write_matrix(&dir.join("mean.bin"), &mean)?;
        write_matrix_csv(&dir.join("mean.csv"), &mean)?;
        let cov = RawMatrix::from(&self.analysis_cov.to_dense());
        write_matrix(&dir.join("cov.bin"), &cov)?;
        write_matrix_csv(&dir.join("cov.csv"), &cov)?;
        self.chain.write_trace_csv(&dir.join("chain.csv"))?;
        let manifest = WindowManifest {
            t0: self.t0,
            tf: self.tf,
            seed: self.chain.seed,
            gaussian_sampler: GAUSSIAN_SAMPLER,
            proposals_total: self.chain.proposals_total,
            accepted_total: self.chain.accepted_total,
            acceptance_rate: self.chain.acceptance_rate(),
            n_samples: self.analysis_ensemble.len(),
            forecast_members: self.forecast_ensemble.len(),
            forward_runs: self.cost.forward_runs(),
            adjoint_runs: self.cost.adjoint_runs(),
            config: cfg,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.toml"), text)?;
        Ok(())
    }
}

/// Diagonal mass matrix holding the diagonal of `B0^{-1}`.
pub fn build_mass_matrix(b0: &CovarianceModel) -> Result<MassMatrix> {
    MassMatrix::new(b0.inverse_diagonal()?)
}

/// Background covariance for one window under `mode`.
pub fn assemble_b0(
    modeled: &Arc<CovarianceModel>,
    mode: B0Mode,
    taper: Option<&TaperSpec>,
    forecast_ens: Option<&Ensemble>,
) -> Result<Arc<CovarianceModel>> {
    match mode {
        B0Mode::Fixed => Ok(modeled.clone()),
        B0Mode::Hybrid { gamma } => {
            let ens = forecast_ens.ok_or(Error::InsufficientMembers(0))?;
            if ens.len() < 2 {
                return Err(Error::InsufficientMembers(ens.len()));
            }
            let mut ens_cov = ensemble_covariance(ens)?;
            if let Some(t) = taper {
                ens_cov = apply_taper(&ens_cov, t)?;
            }
            if gamma == 1.0 {
                return Ok(modeled.clone());
            }
            Ok(Arc::new(hybrid_update(modeled, &ens_cov, gamma)?))
        }
    }
}

/// Samples the posterior of one window and forecasts the samples to its end.
pub fn analyze_window(
    win: &AssimilationWindow,
    cfg: &SmootherConfig,
    forecast_ens: Option<&Ensemble>,
) -> Result<WindowResult> {
    cfg.validate()?;
    let b0 = assemble_b0(win.b0(), cfg.b0_mode, cfg.taper.as_ref(), forecast_ens)?;
    let win = win.with_b0(b0.clone())?.with_fresh_counters();
    let mass = build_mass_matrix(&b0)?;
    let chain_start = match cfg.init_strategy {
        InitStrategy::Background => win.background().clone(),
        InitStrategy::FourdvarWarmStart { max_iter } => {
            let lb = LbfgsConfig { max_iterations: max_iter, ..Default::default() };
            minimize(&win, win.background(), &lb)?.analysis
        }
    };
    let chain = run_chain(&chain_start, &mass, &win, &cfg.hmc)?;
    let cost = CostLedger::from_counters(win.counters());
    let analysis_ensemble = chain.samples.clone().with_time(win.t0());
    let analysis_mean = ensemble_mean(&analysis_ensemble)?;
    let analysis_cov = ensemble_covariance(&analysis_ensemble)?;
    let forecast_ensemble = forecast_step(&analysis_ensemble, win.model().as_ref(), win.t0(), win.tf())?;
    Ok(WindowResult {
        t0: win.t0(),
        tf: win.tf(),
        background: win.background().clone(),
        b0,
        chain_start,
        analysis_ensemble,
        analysis_mean,
        analysis_cov,
        forecast_ensemble,
        chain,
        cost,
    })
}

/// Member-wise propagation from `t0` to `tf`. Diverged members are dropped;
/// losing more than half of the ensemble is an error.
pub fn forecast_step(ens: &Ensemble, model: &dyn Model, t0: f64, tf: f64) -> Result<Ensemble> {
    if ens.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut kept = Vec::with_capacity(ens.len());
    for (e, m) in ens.members().iter().enumerate() {
        match propagate(model, m, t0, tf) {
            Ok(x) => kept.push(x),
            Err(Error::Diverged) | Err(Error::NonFinite(_)) => {
                log::warn!("forecast member {e} diverged between t={t0} and t={tf}; dropped");
            }
            Err(other) => return Err(other),
        }
    }
    let lost = ens.len() - kept.len();
    if 2 * lost > ens.len() {
        return Err(Error::EnsembleCollapse { lost, total: ens.len() });
    }
    Ensemble::new(kept, tf)
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Runs consecutive windows. Window `i > 0` takes the mean of the previous
/// forecast as background and, in hybrid mode, blends its covariance into B0.
/// The first window always uses its modeled B0. Window `i > 0` draws from
/// `sub_seed(seed, i)`.
pub fn run_sequential(windows: &[AssimilationWindow], cfg: &SmootherConfig) -> Result<Vec<WindowResult>> {
    cfg.validate()?;
    for (i, pair) in windows.windows(2).enumerate() {
        if !same_time(pair[0].tf(), pair[1].t0()) {
            return Err(Error::NonContiguousWindows { index: i, next: i + 1 });
        }
    }
    let mut results: Vec<WindowResult> = Vec::with_capacity(windows.len());
    for (i, win) in windows.iter().enumerate() {
        let result = match results.last() {
            None => {
                let first_cfg = SmootherConfig { b0_mode: B0Mode::Fixed, ..cfg.clone() };
                analyze_window(win, &first_cfg, None)?
            }
            Some(prev) => {
                let background = ensemble_mean(&prev.forecast_ensemble)?;
                let win = win.with_background(background)?;
                let mut window_cfg = cfg.clone();
                window_cfg.hmc.seed = sub_seed(cfg.hmc.seed, i as u64);
                analyze_window(&win, &window_cfg, Some(&prev.forecast_ensemble))?
            }
        };
        log::info!(
            "window {i} [{}, {}]: acceptance {:.3}",
            result.t0,
            result.tf,
            result.chain.acceptance_rate()
        );
        results.push(result);
    }
    Ok(results)
}
