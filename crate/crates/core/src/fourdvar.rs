//! Strong-constraint 4D-Var: L-BFGS with a strong-Wolfe line search over the
//! window cost.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{AssimilationWindow, Objective};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, CsvWriter};
use crate::model::StateVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    /// Number of stored correction pairs; 0 gives steepest descent.
    pub memory: usize,
    pub max_iterations: usize,
    pub grad_norm_tol: f64,
    pub rel_f_tol: f64,
    pub c1: f64,
    pub c2: f64,
    /// Cap on function evaluations inside one line search.
    pub max_line_search_evals: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 100,
            grad_norm_tol: 1e-10,
            rel_f_tol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_evals: 40,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "line search needs 0 < c1 < c2 < 1, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if self.max_iterations == 0 || self.max_line_search_evals == 0 {
            return Err(Error::InvalidArgument("iteration caps must be positive".into()));
        }
        if !(self.grad_norm_tol > 0.0) || !(self.rel_f_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradNorm,
    RelF,
    MaxIter,
    LineSearchFail,
}

/// One accepted iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub step_length: f64,
    /// Cost and directional derivative at the start of the line search.
    pub previous_cost: f64,
    pub directional_derivative: f64,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub analysis: StateVector,
    pub cost: f64,
    pub iterations: usize,
    pub function_evaluations: usize,
    pub gradient_evaluations: usize,
    pub termination: Termination,
    pub history: Vec<IterationRecord>,
}

impl OptimResult {
    /// CSV iteration log: `iter,J,grad_norm,step`.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut w = CsvWriter::create(path, &["iter", "J", "grad_norm", "step"])?;
        for r in &self.history {
            w.row(&[
                r.iteration.to_string(),
                fmt_f64(r.cost),
                fmt_f64(r.grad_norm),
                fmt_f64(r.step_length),
            ])?;
        }
        w.finish()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Counter<'a, O: ?Sized> {
    objective: &'a O,
    evals: usize,
}

impl<O: Objective + ?Sized> Counter<'_, O> {
    /// Value and gradient at `x`; a diverged model run reads as `+inf`.
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evals += 1;
        match self.objective.value_and_gradient(x) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Ok((f, g)),
            Ok(_) | Err(Error::Diverged) | Err(Error::NonFinite(_)) => {
                Ok((f64::INFINITY, vec![f64::NAN; x.len()]))
            }
            Err(e) => Err(e),
        }
    }
}

struct Trial {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

/// Minimiser of the cubic interpolating `(a, fa, da)` and `(b, fb, db)`,
/// safeguarded into the interior of the bracket.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let width = hi - lo;
    let guard = |t: f64| t.clamp(lo + 0.1 * width, hi - 0.1 * width);
    if !fb.is_finite() || !db.is_finite() {
        return guard(0.5 * (a + b));
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return guard(0.5 * (a + b));
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    if t.is_finite() {
        guard(t)
    } else {
        guard(0.5 * (a + b))
    }
}

enum Search {
    Found(Trial),
    Failed,
}

#[allow(clippy::too_many_arguments)]
fn strong_wolfe<O: Objective + ?Sized>(
    counter: &mut Counter<'_, O>,
    x: &[f64],
    f0: f64,
    dphi0: f64,
    dir: &[f64],
    alpha_init: f64,
    cfg: &LbfgsConfig,
) -> Result<Search> {
    let mut budget = cfg.max_line_search_evals;
    let mut probe = |counter: &mut Counter<'_, O>, alpha: f64| -> Result<Option<Trial>> {
        if budget == 0 {
            return Ok(None);
        }
        budget -= 1;
        let xt: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + alpha * d).collect();
        let (f, g) = counter.eval(&xt)?;
        let dphi = if f.is_finite() { dot(&g, dir) } else { f64::NAN };
        Ok(Some(Trial { alpha, f, g, dphi }))
    };
    let armijo = |t: &Trial| t.f.is_finite() && t.f <= f0 + cfg.c1 * t.alpha * dphi0;
    let curvature = |t: &Trial| t.dphi.abs() <= -cfg.c2 * dphi0;

    let mut prev = Trial { alpha: 0.0, f: f0, g: vec![], dphi: dphi0 };
    let mut alpha = alpha_init;
    let mut first = true;
    let (mut lo, mut hi) = loop {
        let Some(t) = probe(counter, alpha)? else { return Ok(Search::Failed) };
        if !armijo(&t) || (!first && t.f >= prev.f) {
            break (prev, t);
        }
        if curvature(&t) {
            return Ok(Search::Found(t));
        }
        if t.dphi >= 0.0 {
            break (t, prev);
        }
        alpha = 2.0 * t.alpha;
        prev = t;
        first = false;
    };

    loop {
        let a = cubic_step(lo.alpha, lo.f, lo.dphi, hi.alpha, hi.f, hi.dphi);
        let Some(t) = probe(counter, a)? else { return Ok(Search::Failed) };
        if !armijo(&t) || t.f >= lo.f {
            hi = t;
        } else {
            if curvature(&t) {
                return Ok(Search::Found(t));
            }
            if t.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
        if (hi.alpha - lo.alpha).abs() <= f64::EPSILON * lo.alpha.abs().max(1.0) {
            return Ok(Search::Failed);
        }
    }
}

/// L-BFGS minimisation of an arbitrary objective.
pub fn lbfgs<O: Objective + ?Sized>(objective: &O, x_init: &[f64], cfg: &LbfgsConfig) -> Result<OptimResult> {
    cfg.validate()?;
    if x_init.len() != objective.dim() {
        return Err(Error::DimensionMismatch { expected: objective.dim(), found: x_init.len() });
    }
    let mut counter = Counter { objective, evals: 0 };
    let mut x = x_init.to_vec();
    let (mut f, mut g) = counter.eval(&x)?;
    if !f.is_finite() {
        return Err(Error::Diverged);
    }
    let mut pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut history = Vec::new();
    let mut iterations = 0;

    let termination = loop {
        if norm(&g) <= cfg.grad_norm_tol {
            break Termination::GradNorm;
        }
        if iterations >= cfg.max_iterations {
            break Termination::MaxIter;
        }

        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut dphi0 = dot(&g, &dir);
        if !(dphi0 < 0.0) {
            pairs.clear();
            dir = g.iter().map(|v| -v).collect();
            dphi0 = dot(&g, &dir);
        }
        let alpha_init = if iterations == 0 { 1.0f64.min(1.0 / norm(&g)) } else { 1.0 };

        let trial = match strong_wolfe(&mut counter, &x, f, dphi0, &dir, alpha_init, cfg)? {
            Search::Found(t) => t,
            Search::Failed => break Termination::LineSearchFail,
        };
        iterations += 1;
        let x_new: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + trial.alpha * d).collect();
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if cfg.memory > 0 && sy > f64::EPSILON * norm(&s) * norm(&y) {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let f_prev = f;
        history.push(IterationRecord {
            iteration: iterations,
            cost: trial.f,
            grad_norm: norm(&trial.g),
            step_length: trial.alpha,
            previous_cost: f_prev,
            directional_derivative: dphi0,
        });
        x = x_new;
        f = trial.f;
        g = trial.g;
        if norm(&g) <= cfg.grad_norm_tol {
            break Termination::GradNorm;
        }
        if (f_prev - f) <= cfg.rel_f_tol * f_prev.abs().max(f.abs()) {
            break Termination::RelF;
        }
    };

    Ok(OptimResult {
        analysis: StateVector::new(x)?,
        cost: f,
        iterations,
        function_evaluations: counter.evals,
        gradient_evaluations: counter.evals,
        termination,
        history,
    })
}

/// 4D-Var analysis: minimises the window cost starting from `x_init`.
pub fn minimize(win: &AssimilationWindow, x_init: &StateVector, cfg: &LbfgsConfig) -> Result<OptimResult> {
    lbfgs(win, x_init, cfg)
}
