//! Limited-memory BFGS with a strong-Wolfe line search, and a coarse-to-fine
//! wrapper that frees coefficient bands stage by stage.

use crate::error::{AmvError, Result};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// A smooth objective with an analytic gradient.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    /// Returns the value at `x` and writes the gradient into `grad`.
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Adapts a closure `(x, grad) -> f` into an [`Objective`].
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) -> f64 + Sync> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) -> f64 + Sync> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.f)(x, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsOptions {
    pub memory: usize,
    /// Absolute stopping level on `||g||_inf`.
    pub g_tol: f64,
    /// Stopping level on `||g||_inf` relative to the starting gradient.
    pub rel_g_tol: f64,
    /// Relative objective change below which iterations stop; 0 disables.
    pub f_rel_tol: f64,
    pub max_iterations: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            g_tol: 1e-10,
            rel_g_tol: 0.0,
            f_rel_tol: 0.0,
            max_iterations: 200,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

impl LbfgsOptions {
    /// Inexact budget used inside ADMM passes.
    pub fn inner() -> Self {
        Self { max_iterations: 50, rel_g_tol: 1e-6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(AmvError::InvalidConfig(format!(
                "Wolfe constants need 0 < c1 < c2 < 1, got c1={}, c2={}",
                self.c1, self.c2
            )));
        }
        if self.memory == 0 || self.max_line_search == 0 {
            return Err(AmvError::InvalidConfig("memory and line-search budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LbfgsStatus {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailed,
}

/// Line-search data at an accepted step: `phi(0)`, `phi'(0)`, `alpha`,
/// `phi(alpha)`, `phi'(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WolfeCertificate {
    pub f0: f64,
    pub slope0: f64,
    pub alpha: f64,
    pub f: f64,
    pub slope: f64,
}

impl WolfeCertificate {
    pub fn satisfies(&self, c1: f64, c2: f64) -> bool {
        self.f <= self.f0 + c1 * self.alpha * self.slope0 && self.slope.abs() <= c2 * self.slope0.abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: LbfgsStatus,
    pub certificates: Vec<WolfeCertificate>,
}

impl LbfgsResult {
    pub fn grad_inf(&self) -> f64 {
        inf_norm(&self.grad)
    }

    /// Converts a line-search failure into an error.
    pub fn check(self) -> Result<Self> {
        if self.status == LbfgsStatus::LineSearchFailed {
            Err(AmvError::LineSearchFailure { iterations: self.iterations })
        } else {
            Ok(self)
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Evaluator<'a> {
    obj: &'a dyn Objective,
    active: Option<&'a [bool]>,
    count: usize,
}

impl Evaluator<'_> {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.count += 1;
        let f = self.obj.eval(x, grad);
        if let Some(mask) = self.active {
            grad.iter_mut().zip(mask).filter(|(_, a)| !**a).for_each(|(g, _)| *g = 0.0);
        }
        f
    }
}

struct Trial {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

fn cubic_min(a: &Trial, b: &Trial) -> Option<f64> {
    let d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    t.is_finite().then_some(t)
}

/// Strong-Wolfe line search (bracketing phase plus zoom with safeguarded
/// cubic interpolation). Returns `None` if no acceptable step is found.
fn line_search(
    ev: &mut Evaluator<'_>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    p: &[f64],
    alpha_init: f64,
    opts: &LbfgsOptions,
) -> Option<Trial> {
    let slope0 = dot(g0, p);
    let n = x.len();
    let mut probe = |alpha: f64, ev: &mut Evaluator<'_>| -> Trial {
        let xa: Vec<f64> = x.iter().zip(p).map(|(xi, pi)| xi + alpha * pi).collect();
        let mut g = vec![0.0; n];
        let f = ev.eval(&xa, &mut g);
        let slope = dot(&g, p);
        Trial { alpha, f, slope, x: xa, g }
    };
    let mut prev = Trial { alpha: 0.0, f: f0, slope: slope0, x: x.to_vec(), g: g0.to_vec() };
    let mut alpha = alpha_init;
    let mut evals = 0;
    let mut first = true;
    while evals < opts.max_line_search {
        let cur = probe(alpha, ev);
        evals += 1;
        if !cur.f.is_finite() {
            alpha = 0.5 * (prev.alpha + alpha);
            continue;
        }
        if cur.f > f0 + opts.c1 * alpha * slope0 || (!first && cur.f >= prev.f) {
            return zoom(ev, &mut probe, prev, cur, f0, slope0, opts, evals);
        }
        if cur.slope.abs() <= -opts.c2 * slope0 {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            return zoom(ev, &mut probe, cur, prev, f0, slope0, opts, evals);
        }
        first = false;
        prev = cur;
        alpha *= 2.0;
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom(
    ev: &mut Evaluator<'_>,
    probe: &mut impl FnMut(f64, &mut Evaluator<'_>) -> Trial,
    mut lo: Trial,
    mut hi: Trial,
    f0: f64,
    slope0: f64,
    opts: &LbfgsOptions,
    mut evals: usize,
) -> Option<Trial> {
    while evals < opts.max_line_search {
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let width = b - a;
        if width <= 1e-16 * b.max(1e-300) {
            return None;
        }
        let guard = 0.1 * width;
        let alpha = match cubic_min(&lo, &hi) {
            Some(t) if t > a + guard && t < b - guard => t,
            Some(t) => t.clamp(a + guard, b - guard),
            None => 0.5 * (a + b),
        };
        let cur = probe(alpha, ev);
        evals += 1;
        if !cur.f.is_finite() || cur.f > f0 + opts.c1 * alpha * slope0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.slope.abs() <= -opts.c2 * slope0 {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = std::mem::replace(&mut lo, cur);
            } else {
                lo = cur;
            }
        }
    }
    None
}

/// Minimises `obj` from `x0`.
pub fn minimize(obj: &dyn Objective, x0: &[f64], opts: &LbfgsOptions) -> Result<LbfgsResult> {
    minimize_masked(obj, x0, None, opts)
}

/// Minimises `obj` over the entries flagged in `active`; the others keep
/// their starting value.
pub fn minimize_masked(
    obj: &dyn Objective,
    x0: &[f64],
    active: Option<&[bool]>,
    opts: &LbfgsOptions,
) -> Result<LbfgsResult> {
    opts.validate()?;
    let n = obj.dim();
    if x0.len() != n || active.is_some_and(|a| a.len() != n) {
        return Err(AmvError::ShapeMismatch(format!("minimize: objective has {n} variables, start has {}", x0.len())));
    }
    let mut ev = Evaluator { obj, active, count: 0 };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = ev.eval(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(AmvError::NonFiniteObjective);
    }
    let g0_inf = inf_norm(&g);
    let g_stop = opts.g_tol.max(opts.rel_g_tol * g0_inf);
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut certificates = Vec::new();
    let mut iterations = 0;
    let mut status = LbfgsStatus::MaxIterations;
    let mut retried = false;

    loop {
        if inf_norm(&g) <= g_stop {
            status = LbfgsStatus::GradientTolerance;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        // two-loop recursion
        let mut p: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &p);
            p.iter_mut().zip(y).for_each(|(pi, yi)| *pi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let scale = dot(s, y) / dot(y, y);
            p.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &p);
            p.iter_mut().zip(s).for_each(|(pi, si)| *pi += (a - b) * si);
        }
        if dot(&p, &g) >= 0.0 {
            pairs.clear();
            p = g.iter().map(|v| -v).collect();
        }
        let alpha_init = if pairs.is_empty() {
            1.0 / dot(&g, &g).sqrt().max(1.0)
        } else {
            1.0
        };
        let Some(trial) = line_search(&mut ev, &x, f, &g, &p, alpha_init, opts) else {
            if !pairs.is_empty() && !retried {
                pairs.clear();
                retried = true;
                continue;
            }
            status = LbfgsStatus::LineSearchFailed;
            log::debug!("line search failed after {iterations} iterations");
            break;
        };
        retried = false;
        certificates.push(WolfeCertificate {
            f0: f,
            slope0: dot(&g, &p),
            alpha: trial.alpha,
            f: trial.f,
            slope: trial.slope,
        });
        let s: Vec<f64> = trial.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let f_old = f;
        x = trial.x;
        g = trial.g;
        f = trial.f;
        iterations += 1;
        if opts.f_rel_tol > 0.0 && (f_old - f).abs() <= opts.f_rel_tol * f_old.abs().max(f.abs()).max(1e-300) {
            status = LbfgsStatus::FunctionTolerance;
            break;
        }
    }
    Ok(LbfgsResult { x, f, grad: g, iterations, evaluations: ev.count, status, certificates })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: usize,
    pub iterations: usize,
    pub f: f64,
    pub status: LbfgsStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleResult {
    pub result: LbfgsResult,
    pub stages: Vec<StageSummary>,
}

impl MultiscaleResult {
    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }
}

/// Runs [`minimize_masked`] once per stage. Each stage starts from the
/// previous result with its inactive entries set to zero.
pub fn multiscale_minimize(
    obj: &dyn Objective,
    x0: &[f64],
    stage_masks: &[Vec<bool>],
    opts: &LbfgsOptions,
) -> Result<MultiscaleResult> {
    if stage_masks.is_empty() {
        return Err(AmvError::BadSchedule("no stages".into()));
    }
    for pair in stage_masks.windows(2) {
        if pair[0].iter().zip(&pair[1]).any(|(a, b)| *a && !*b) {
            return Err(AmvError::BadSchedule("stage masks must be nested".into()));
        }
    }
    let mut x = x0.to_vec();
    let mut stages = Vec::with_capacity(stage_masks.len());
    let mut last = None;
    for (stage, mask) in stage_masks.iter().enumerate() {
        if mask.len() != x.len() {
            return Err(AmvError::ShapeMismatch(format!(
                "stage mask has {} entries, objective {}",
                mask.len(),
                x.len()
            )));
        }
        x.iter_mut().zip(mask).filter(|(_, a)| !**a).for_each(|(v, _)| *v = 0.0);
        let res = minimize_masked(obj, &x, Some(mask), opts)?;
        stages.push(StageSummary { stage, iterations: res.iterations, f: res.f, status: res.status });
        x.clone_from(&res.x);
        last = Some(res);
    }
    Ok(MultiscaleResult { result: last.expect("at least one stage"), stages })
}
