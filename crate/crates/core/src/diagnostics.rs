//! Scalar and distributional metrics: RMSE, mode masses, histograms, chain
//! diagnostics and cost accounting in equivalent forward model runs.

use std::fmt::Write as _;
use std::path::Path;

use crate::cost::RunCounters;
use crate::covariance::Ensemble;
use crate::error::{Error, Result};
use crate::hmc::ChainRecord;
use crate::io::{fmt_f64, CsvWriter};

/// Default cost of one adjoint run relative to one forward run.
pub const ADJOINT_COST_RATIO: f64 = 2.5;

/// `sqrt(mean((x - x_true)^2))`
pub fn rmse(x: &[f64], x_true: &[f64]) -> Result<f64> {
    if x.len() != x_true.len() {
        return Err(Error::DimensionMismatch { expected: x_true.len(), found: x.len() });
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("rmse of an empty vector".into()));
    }
    let ss: f64 = x.iter().zip(x_true).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / x.len() as f64).sqrt())
}

/// Fractions of scalar samples strictly below and at-or-above `boundary`.
pub fn mode_masses(samples: &Ensemble, boundary: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if samples.nvar() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, found: samples.nvar() });
    }
    let n = samples.len();
    let left = samples.members().iter().filter(|m| m[0] < boundary).count();
    Ok((left as f64 / n as f64, (n - left) as f64 / n as f64))
}

/// `mean(sign(x))` over scalar samples; zero counts as positive.
pub fn mean_sign(samples: &Ensemble) -> Result<f64> {
    let (left, right) = mode_masses(samples, 0.0)?;
    Ok(right - left)
}

/// Equal-width bin counts over `[lo, hi)`; the last bin is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Values outside `[lo, hi]`.
    pub outside: u64,
}

pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
    if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("histogram needs bins >= 1 and lo < hi, got {bins} [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
    let mut counts = vec![0u64; bins];
    let mut outside = 0;
    for &v in values {
        if !(lo..=hi).contains(&v) {
            outside += 1;
            continue;
        }
        let mut b = (((v - lo) / width) as usize).min(bins - 1);
        // floating-point division can land one bin off the edge table
        while b > 0 && v < edges[b] {
            b -= 1;
        }
        while b + 1 < bins && v >= edges[b + 1] {
            b += 1;
        }
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts, outside })
}

impl Histogram {
    /// Rows `bin_lo,bin_hi,count`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = CsvWriter::create(path, &["bin_lo", "bin_hi", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            w.row(&[fmt_f64(self.edges[i]), fmt_f64(self.edges[i + 1]), c.to_string()])?;
        }
        w.finish()
    }
}

/// Integrated autocorrelation time `1 + 2 sum rho_k`, truncated by Geyer's
/// initial positive sequence. A constant series reports infinity.
pub fn integrated_autocorrelation_time(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 2 {
        return f64::INFINITY;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let autocov = |k: usize| dev[..n - k].iter().zip(&dev[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let c0 = autocov(0);
    if !(c0 > 0.0) {
        return f64::INFINITY;
    }
    let mut sum = 0.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = autocov(2 * m) + autocov(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        m += 1;
    }
    ((-c0 + 2.0 * sum) / c0).max(0.0)
}

pub fn effective_sample_size(series: &[f64]) -> f64 {
    series.len() as f64 / integrated_autocorrelation_time(series)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSummary {
    pub acceptance_rate: f64,
    /// Over finite energy errors only.
    pub mean_abs_delta_h: f64,
    pub diverged: usize,
    pub iact: f64,
}

/// Summary with the IACT of the coordinate-mean of the kept samples.
pub fn chain_diagnostics(rec: &ChainRecord) -> ChainSummary {
    chain_diagnostics_with(rec, |x| x.iter().sum::<f64>() / x.len() as f64)
}

pub fn chain_diagnostics_with<F: Fn(&[f64]) -> f64>(rec: &ChainRecord, functional: F) -> ChainSummary {
    let finite: Vec<f64> = rec.energy_trace.iter().map(|e| e.delta_h).filter(|d| d.is_finite()).collect();
    let mean_abs_delta_h =
        if finite.is_empty() { f64::NAN } else { finite.iter().map(|d| d.abs()).sum::<f64>() / finite.len() as f64 };
    let series: Vec<f64> = rec.samples.members().iter().map(|m| functional(m)).collect();
    ChainSummary {
        acceptance_rate: rec.acceptance_rate(),
        mean_abs_delta_h,
        diverged: rec.energy_trace.len() - finite.len(),
        iact: integrated_autocorrelation_time(&series),
    }
}

/// Standard normal CDF.
pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function, relative error below 1.2e-7.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807 + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Kolmogorov-Smirnov statistic `sup |F_n - F|`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic one-sample KS critical value at the 1% level.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// Model runs in units of one forward run.
#[derive(Debug, Clone, PartialEq)]
pub struct CostLedger {
    forward_runs: u64,
    adjoint_runs: u64,
    adjoint_cost_ratio: f64,
    equivalent_forward_runs: f64,
}

impl CostLedger {
    pub fn new(forward_runs: u64, adjoint_runs: u64) -> Self {
        Self::with_ratio(forward_runs, adjoint_runs, ADJOINT_COST_RATIO)
    }

    pub fn with_ratio(forward_runs: u64, adjoint_runs: u64, adjoint_cost_ratio: f64) -> Self {
        Self {
            forward_runs,
            adjoint_runs,
            adjoint_cost_ratio,
            equivalent_forward_runs: forward_runs as f64 + adjoint_cost_ratio * adjoint_runs as f64,
        }
    }

    pub fn from_counters(counters: &RunCounters) -> Self {
        Self::new(counters.forward_runs(), counters.adjoint_runs())
    }

    /// Nominal HMC accounting: two forward runs and one adjoint run per
    /// proposal, i.e. 4.5 equivalent runs at the default ratio.
    pub fn hmc_nominal(proposals: u64) -> Self {
        Self::new(2 * proposals, proposals)
    }

    /// Nominal 4D-Var accounting: one forward run per function evaluation
    /// plus one forward and one adjoint run per iteration (3.5 each).
    pub fn fourdvar_nominal(function_evaluations: u64, iterations: u64) -> Self {
        Self::new(function_evaluations + iterations, iterations)
    }

    pub fn forward_runs(&self) -> u64 {
        self.forward_runs
    }

    pub fn adjoint_runs(&self) -> u64 {
        self.adjoint_runs
    }

    pub fn adjoint_cost_ratio(&self) -> f64 {
        self.adjoint_cost_ratio
    }

    pub fn equivalent_forward_runs(&self) -> f64 {
        self.equivalent_forward_runs
    }

    pub fn merged(&self, other: &Self) -> Result<Self> {
        if self.adjoint_cost_ratio != other.adjoint_cost_ratio {
            return Err(Error::InvalidArgument("cannot merge ledgers with different adjoint ratios".into()));
        }
        Ok(Self::with_ratio(
            self.forward_runs + other.forward_runs,
            self.adjoint_runs + other.adjoint_runs,
            self.adjoint_cost_ratio,
        ))
    }
}

/// Whether a row was counted by instrumentation or computed from the
/// nominal per-step formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostBasis {
    Measured,
    Nominal,
}

impl CostBasis {
    pub fn label(self) -> &'static str {
        match self {
            CostBasis::Measured => "measured",
            CostBasis::Nominal => "nominal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub scheme: String,
    pub basis: CostBasis,
    /// Proposals for HMC, iterations for 4D-Var, updates for EnKS.
    pub steps: u64,
    pub ledger: CostLedger,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

/// Collects ledger rows into a report.
pub fn cost_ledger_report<'a, I>(rows: I) -> CostReport
where
    I: IntoIterator<Item = (&'a str, CostBasis, u64, CostLedger)>,
{
    CostReport {
        rows: rows
            .into_iter()
            .map(|(scheme, basis, steps, ledger)| CostRow { scheme: scheme.to_string(), basis, steps, ledger })
            .collect(),
    }
}

impl CostReport {
    pub fn push(&mut self, scheme: &str, basis: CostBasis, steps: u64, ledger: CostLedger) {
        self.rows.push(CostRow { scheme: scheme.to_string(), basis, steps, ledger });
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = CsvWriter::create(
            path,
            &["scheme", "basis", "steps", "forward_runs", "adjoint_runs", "adjoint_cost_ratio", "equivalent_forward_runs"],
        )?;
        for r in &self.rows {
            w.row(&[
                r.scheme.clone(),
                r.basis.label().to_string(),
                r.steps.to_string(),
                r.ledger.forward_runs().to_string(),
                r.ledger.adjoint_runs().to_string(),
                fmt_f64(r.ledger.adjoint_cost_ratio()),
                fmt_f64(r.ledger.equivalent_forward_runs()),
            ])?;
        }
        w.finish()
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:<9} {:>8} {:>10} {:>10} {:>14}",
            "scheme", "basis", "steps", "forward", "adjoint", "equiv. runs"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:<9} {:>8} {:>10} {:>10} {:>14.1}",
                r.scheme,
                r.basis.label(),
                r.steps,
                r.ledger.forward_runs(),
                r.ledger.adjoint_runs(),
                r.ledger.equivalent_forward_runs()
            );
        }
        out
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.text_table())?;
        Ok(())
    }
}
