//! Joint and even/odd split ADMM drivers, hard and soft hydrostatic
//! constraints, and the benchmark variants.

use crate::diffops::{apply_d, apply_l, norm};
use crate::energy::{
    l1_term, DisplacementParam, DualState, ForwardModel, HydroMode, JointObjective, LayerObjective, OmegaSlot,
    SolverConfig,
};
use crate::error::{AmvError, Result};
use crate::grid::{AmvState, ObservationSet, PressureGrid, Timestamp, CHANNELS};
use crate::lbfgs::{minimize, multiscale_minimize, LbfgsOptions, LbfgsResult, LbfgsStatus, Objective};
use crate::wavelet::{prox_step, ScaleSchedule};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdmmMode {
    Joint,
    Split,
}

/// How the hydrostatic constraint is imposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Constraint {
    None,
    Soft,
    Hard,
}

/// The benchmark variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Independent per-layer flow, vertical winds pinned at zero.
    #[serde(rename = "2d")]
    TwoD,
    /// As `TwoD` with a soft zero-divergence penalty.
    #[serde(rename = "2d-inc")]
    TwoDIncompressible,
    /// Free vertical winds, no hydrostatic coupling.
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "3d-hydro-soft")]
    ThreeDHydroSoft,
    #[serde(rename = "3d-hydro-hard")]
    ThreeDHydroHard,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TwoD,
        Variant::TwoDIncompressible,
        Variant::ThreeD,
        Variant::ThreeDHydroSoft,
        Variant::ThreeDHydroHard,
    ];

    /// The constraint each variant is defined with.
    pub fn constraint(self) -> Constraint {
        match self {
            Variant::TwoD | Variant::ThreeD => Constraint::None,
            Variant::TwoDIncompressible | Variant::ThreeDHydroSoft => Constraint::Soft,
            Variant::ThreeDHydroHard => Constraint::Hard,
        }
    }

    pub fn omega_free(self) -> bool {
        matches!(self, Variant::ThreeD | Variant::ThreeDHydroSoft | Variant::ThreeDHydroHard)
    }

    pub fn hydro_mode(self) -> HydroMode {
        match self.constraint() {
            Constraint::None => HydroMode::Off,
            Constraint::Soft => HydroMode::Soft,
            Constraint::Hard => HydroMode::Hard,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::TwoD => "2d",
            Variant::TwoDIncompressible => "2d-inc",
            Variant::ThreeD => "3d",
            Variant::ThreeDHydroSoft => "3d-hydro-soft",
            Variant::ThreeDHydroHard => "3d-hydro-hard",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = AmvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "2d" => Ok(Variant::TwoD),
            "2d-inc" | "2d-incompressible" => Ok(Variant::TwoDIncompressible),
            "3d" => Ok(Variant::ThreeD),
            "3d-hydro-soft" => Ok(Variant::ThreeDHydroSoft),
            "3d-hydro-hard" => Ok(Variant::ThreeDHydroHard),
            other => Err(AmvError::InvalidConfig(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmOptions {
    pub mode: AdmmMode,
    pub variant: Variant,
    /// Must agree with the variant when given.
    pub constraint: Option<Constraint>,
    pub max_outer: usize,
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub inner: LbfgsOptions,
    /// Run the coarse-to-fine schedule in the first outer iteration.
    pub multiscale: bool,
    /// Solve independent subproblems on the rayon pool.
    pub parallel: bool,
    /// Accept an odd layer count in split mode (the last layer joins the even half).
    pub allow_odd_k: bool,
    /// Dispatch each half-step's subproblems in reverse order.
    pub reverse_order: bool,
    /// Start `c` from the analysis of the masked `t1` observations, gaps filled with channel means.
    pub init_from_observations: bool,
    pub divergence_factor: f64,
    pub param: DisplacementParam,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            mode: AdmmMode::Joint,
            variant: Variant::ThreeDHydroHard,
            constraint: None,
            max_outer: 50,
            eps_primal: 1e-3,
            eps_dual: 1e-3,
            inner: LbfgsOptions::inner(),
            multiscale: true,
            parallel: true,
            allow_odd_k: true,
            reverse_order: false,
            init_from_observations: true,
            divergence_factor: 1e6,
            param: DisplacementParam::Wavelet,
        }
    }
}

impl AdmmOptions {
    pub fn for_variant(variant: Variant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_primal > 0.0) || !(self.eps_dual > 0.0) {
            return Err(AmvError::InvalidConfig("ADMM tolerances must be positive".into()));
        }
        if let Some(c) = self.constraint {
            if c != self.variant.constraint() {
                return Err(AmvError::IncompatibleVariant {
                    variant: self.variant.name().into(),
                    detail: format!("constraint {c:?} (expected {:?})", self.variant.constraint()),
                });
            }
        }
        self.inner.validate()
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmRecord {
    pub iteration: usize,
    pub objective: f64,
    /// `||D d - L w|| / max(||D d||, ||L w||)`.
    pub primal_hydro: f64,
    /// `||c - c~|| / max(||c||, ||c~||)`.
    pub primal_c: f64,
    /// `||w - w~|| / max(||w||, ||w~||)`, zero outside split mode.
    pub primal_omega: f64,
    /// Relative change of the consensus copies.
    pub dual: f64,
    pub inner_iterations: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdmmTrace {
    pub records: Vec<AdmmRecord>,
    pub converged: bool,
    pub initial_objective: f64,
    /// Layers solved in each half-step of a split iteration.
    pub half_steps: Vec<Vec<usize>>,
    /// Inner solves that ended in a line-search failure.
    pub line_search_failures: usize,
}

impl AdmmTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "iteration,objective,primal_hydro,primal_c,primal_omega,dual,inner_iterations,wall_time\n",
        );
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{},{:.8e}\n",
                r.iteration,
                r.objective,
                r.primal_hydro,
                r.primal_c,
                r.primal_omega,
                r.dual,
                r.inner_iterations,
                r.wall_time
            ));
        }
        s
    }
}

/// Starting point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Start {
    pub state: AmvState,
    /// `None` starts the multipliers at zero with consensus copies equal to the primal values.
    pub duals: Option<DualState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmOutput {
    /// Primal estimate; in split mode the winds are the even-half copy.
    pub state: AmvState,
    pub duals: DualState,
    pub trace: AdmmTrace,
    /// `||w - w~||_inf` at exit (split mode).
    pub omega_disagreement: f64,
}

impl AdmmOutput {
    pub fn final_objective(&self) -> f64 {
        self.trace.records.last().map_or(self.trace.initial_objective, |r| r.objective)
    }
}

fn rel(diff: f64, a: f64, b: f64) -> f64 {
    let den = a.max(b);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    rel(d, norm(a), norm(b))
}

/// Objective reported in traces: data + regularisation + `alpha_x ||c~||_1`,
/// plus the soft penalty when the constraint is soft.
pub fn problem_objective(
    model: &ForwardModel,
    obs: &ObservationSet,
    cfg: &SolverConfig,
    variant: Variant,
    state: &AmvState,
    c_tilde: &[f64],
) -> Result<f64> {
    let soft = (variant.constraint() == Constraint::Soft).then_some(cfg.rho);
    let terms = model.smooth_energy(state, obs, cfg, soft)?;
    Ok(terms.total() + l1_term(c_tilde, &cfg.alpha_x))
}

fn relative_hydro(state: &AmvState, grid: &PressureGrid, omega: &[f64]) -> Result<f64> {
    let m = state.shape.len();
    let dd = apply_d(&state.d, grid, state.shape)?;
    let lw = apply_l(omega, state.layers, m)?;
    let diff = dd.iter().zip(&lw).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(rel(diff, norm(&dd), norm(&lw)))
}

/// `c` from the masked `t1` observations. Gaps take the `t0` value where
/// that is observed and the channel mean elsewhere.
pub fn coefficients_from_observations(model: &ForwardModel, obs: &ObservationSet) -> Result<Vec<f64>> {
    let m = model.shape.len();
    let mut x = vec![0.0; obs.layers * CHANNELS * m];
    for k in 0..obs.layers {
        let (mask1, mask0) = (obs.mask(Timestamp::T1, k), obs.mask(Timestamp::T0, k));
        let (y1, y0) = (obs.y_layer(Timestamp::T1, k), obs.y_layer(Timestamp::T0, k));
        for l in 0..CHANNELS {
            let plane = &y1[l * m..(l + 1) * m];
            let (sum, count) =
                plane.iter().zip(mask1).filter(|(_, v)| **v).fold((0.0, 0usize), |(s, c), (y, _)| (s + y, c + 1));
            let mean = if count > 0 { sum / count as f64 } else { 0.0 };
            for j in 0..m {
                x[(k * CHANNELS + l) * m + j] = if mask1[j] {
                    plane[j]
                } else if mask0[j] {
                    y0[l * m + j]
                } else {
                    mean
                };
            }
        }
    }
    model.basis.forward(&x)
}

struct Setup {
    model: ForwardModel,
    schedule: ScaleSchedule,
    state: AmvState,
    duals: DualState,
    warm: bool,
}

fn setup(
    obs: &ObservationSet,
    grid: &PressureGrid,
    cfg: &SolverConfig,
    opts: &AdmmOptions,
    start: Option<Start>,
) -> Result<Setup> {
    opts.validate()?;
    let layers = grid.layers();
    cfg.validate(layers)?;
    if obs.layers != layers {
        return Err(AmvError::ShapeMismatch(format!(
            "observations have {} layers, pressure grid {layers}",
            obs.layers
        )));
    }
    let constrained = opts.variant.constraint() != Constraint::None || opts.mode == AdmmMode::Split;
    if constrained && !(cfg.rho > 0.0) && opts.variant.omega_free() {
        return Err(AmvError::NonPositiveRho(cfg.rho));
    }
    if opts.variant.constraint() != Constraint::None && !(cfg.rho > 0.0) {
        return Err(AmvError::NonPositiveRho(cfg.rho));
    }
    if !(cfg.rho_c > 0.0) {
        return Err(AmvError::NonPositiveRho(cfg.rho_c));
    }
    let model = ForwardModel::from_config(obs.shape, grid.clone(), cfg)?;
    let schedule = if opts.multiscale {
        cfg.scale_schedule(&model.basis)?
    } else {
        ScaleSchedule::full(&model.basis)
    };
    let split = opts.mode == AdmmMode::Split;
    let warm = start.is_some();
    let (mut state, duals) = match start {
        Some(Start { state, duals }) => {
            if state.shape != obs.shape || state.layers != layers {
                return Err(AmvError::ShapeMismatch("warm start does not match the observations".into()));
            }
            let duals = duals.unwrap_or_else(|| {
                let mut d = DualState::zeros(obs.shape, layers, split);
                d.c_tilde.clone_from(&state.c);
                if let Some(w) = d.omega_tilde.as_mut() {
                    w.copy_from_slice(state.omega_interior());
                }
                d
            });
            (state, duals)
        }
        None => {
            let mut s = AmvState::zeros(obs.shape, layers);
            let mut d = DualState::zeros(obs.shape, layers, split);
            if opts.init_from_observations {
                s.c = coefficients_from_observations(&model, obs)?;
                d.c_tilde.clone_from(&s.c);
            }
            (s, d)
        }
    };
    if !opts.variant.omega_free() {
        state.omega.fill(0.0);
    }
    Ok(Setup { model, schedule, state, duals, warm })
}

fn inner_solve(
    obj: &dyn Objective,
    x0: &[f64],
    masks: Option<Vec<Vec<bool>>>,
    opts: &LbfgsOptions,
) -> Result<(LbfgsResult, usize)> {
    match masks {
        Some(masks) if masks.len() > 1 => {
            let r = multiscale_minimize(obj, x0, &masks, opts)?;
            let it = r.total_iterations();
            Ok((r.result, it))
        }
        _ => {
            let r = minimize(obj, x0, opts)?;
            let it = r.iterations;
            Ok((r, it))
        }
    }
}

/// Joint ADMM: full-space primal step, proximal step on `c~`, dual updates.
pub fn run_joint_admm(
    obs: &ObservationSet,
    grid: &PressureGrid,
    cfg: &SolverConfig,
    opts: &AdmmOptions,
) -> Result<AdmmOutput> {
    run_joint_admm_from(obs, grid, cfg, opts, None)
}

pub fn run_joint_admm_from(
    obs: &ObservationSet,
    grid: &PressureGrid,
    cfg: &SolverConfig,
    opts: &AdmmOptions,
    start: Option<Start>,
) -> Result<AdmmOutput> {
    let Setup { model, schedule, mut state, mut duals, warm } = setup(obs, grid, cfg, opts, start)?;
    let variant = opts.variant;
    let hydro = variant.hydro_mode();
    let mut trace = AdmmTrace {
        initial_objective: problem_objective(&model, obs, cfg, variant, &state, &duals.c_tilde)?,
        ..AdmmTrace::default()
    };
    let limit = opts.divergence_factor * trace.initial_objective.abs().max(f64::MIN_POSITIVE);

    if warm {
        let h = if hydro == HydroMode::Hard { relative_hydro(&state, grid, state.omega_interior())? } else { 0.0 };
        if h <= opts.eps_primal && rel_diff(&state.c, &duals.c_tilde) <= opts.eps_primal {
            trace.converged = true;
            return Ok(AdmmOutput { state, duals, trace, omega_disagreement: 0.0 });
        }
    }

    let mut x: Option<Vec<f64>> = None;
    for it in 0..opts.max_outer {
        let t0 = Instant::now();
        let c_target = duals.c_target();
        let obj = JointObjective {
            model: &model,
            obs,
            cfg,
            hydro,
            omega_free: variant.omega_free(),
            u_d: &duals.u_d,
            c_target: Some(&c_target),
            param: opts.param,
            parallel: opts.parallel,
        };
        let x0 = x.take().unwrap_or_else(|| obj.pack(&state));
        let masks = (it == 0 && opts.multiscale).then(|| obj.stage_masks(&schedule)).transpose()?;
        let (res, inner_its) = inner_solve(&obj, &x0, masks, &opts.inner)?;
        if res.status == LbfgsStatus::LineSearchFailed {
            trace.line_search_failures += 1;
            log::warn!("outer iteration {it}: inner line search failed, keeping best point");
        }
        obj.unpack_into(&res.x, &mut state);
        x = Some(res.x);

        // proximal step and multipliers
        let c_plus_u: Vec<f64> = state.c.iter().zip(&duals.u_c).map(|(a, b)| a + b).collect();
        let c_tilde_old = std::mem::replace(&mut duals.c_tilde, prox_step(&c_plus_u, &cfg.alpha_x, cfg.rho_c)?);
        for ((u, c), ct) in duals.u_c.iter_mut().zip(&state.c).zip(&duals.c_tilde) {
            *u += c - ct;
        }
        let primal_hydro = relative_hydro(&state, grid, state.omega_interior())?;
        match hydro {
            HydroMode::Hard => {
                let h = crate::diffops::hydrostatic_residual(&state, grid)?;
                duals.u_d.iter_mut().zip(&h).for_each(|(u, r)| *u += r);
            }
            _ => duals.u_d.fill(0.0),
        }

        let primal_c = rel_diff(&state.c, &duals.c_tilde);
        let dual = rel(
            c_tilde_old.iter().zip(&duals.c_tilde).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
            norm(&duals.c_tilde),
            0.0,
        );
        let objective = problem_objective(&model, obs, cfg, variant, &state, &duals.c_tilde)?;
        trace.records.push(AdmmRecord {
            iteration: it,
            objective,
            primal_hydro,
            primal_c,
            primal_omega: 0.0,
            dual,
            inner_iterations: inner_its,
            wall_time: t0.elapsed().as_secs_f64(),
        });
        log::debug!("joint ADMM {it}: f={objective:.6e} h={primal_hydro:.3e} c={primal_c:.3e} dual={dual:.3e}");
        if !objective.is_finite() {
            return Err(AmvError::NonFiniteObjective);
        }
        if objective > limit {
            return Err(AmvError::DivergenceDetected { iteration: it, value: objective, limit });
        }
        let hydro_ok = hydro != HydroMode::Hard || primal_hydro <= opts.eps_primal;
        if hydro_ok && primal_c <= opts.eps_primal && dual <= opts.eps_dual {
            trace.converged = true;
            break;
        }
    }
    Ok(AdmmOutput { state, duals, trace, omega_disagreement: 0.0 })
}

/// Layers of the even and odd half-steps. With an odd count the last layer
/// falls in the even half.
pub fn split_groups(layers: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..layers).step_by(2).collect(), (1..layers).step_by(2).collect())
}

/// Split ADMM: even layers own `w`, odd layers own `w~`; each half-step
/// solves its layer subproblems independently.
pub fn run_split_admm(
    obs: &ObservationSet,
    grid: &PressureGrid,
    cfg: &SolverConfig,
    opts: &AdmmOptions,
) -> Result<AdmmOutput> {
    run_split_admm_from(obs, grid, cfg, opts, None)
}

pub fn run_split_admm_from(
    obs: &ObservationSet,
    grid: &PressureGrid,
    cfg: &SolverConfig,
    opts: &AdmmOptions,
    start: Option<Start>,
) -> Result<AdmmOutput> {
    let layers = grid.layers();
    if layers % 2 == 1 && !opts.allow_odd_k {
        return Err(AmvError::OddLayerCount(layers));
    }
    let opts_split = AdmmOptions { mode: AdmmMode::Split, ..opts.clone() };
    let Setup { model, schedule, mut state, mut duals, warm } = setup(obs, grid, cfg, &opts_split, start)?;
    let variant = opts.variant;
    let hydro = variant.hydro_mode();
    let omega_free = variant.omega_free();
    let m = obs.shape.len();
    let n = CHANNELS * m;
    let (even, odd) = split_groups(layers);
    let mut trace = AdmmTrace {
        initial_objective: problem_objective(&model, obs, cfg, variant, &state, &duals.c_tilde)?,
        half_steps: vec![even.clone(), odd.clone()],
        ..AdmmTrace::default()
    };
    let limit = opts.divergence_factor * trace.initial_objective.abs().max(f64::MIN_POSITIVE);
    let mut omega_tilde = duals.omega_tilde.take().expect("split duals");
    let mut u_omega = duals.u_omega.take().expect("split duals");

    let disagreement = |w: &[f64], wt: &[f64]| w.iter().zip(wt).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    if warm {
        let h = if hydro == HydroMode::Hard { relative_hydro(&state, grid, state.omega_interior())? } else { 0.0 };
        let pw = if omega_free { rel_diff(state.omega_interior(), &omega_tilde) } else { 0.0 };
        if h <= opts.eps_primal && pw <= opts.eps_primal && rel_diff(&state.c, &duals.c_tilde) <= opts.eps_primal {
            trace.converged = true;
            let dis = disagreement(state.omega_interior(), &omega_tilde);
            duals.omega_tilde = Some(omega_tilde);
            duals.u_omega = Some(u_omega);
            return Ok(AdmmOutput { state, duals, trace, omega_disagreement: dis });
        }
    }

    let zeros = vec![0.0; m];
    for it in 0..opts.max_outer {
        let t0 = Instant::now();
        let c_target = duals.c_target();
        let mut inner_total = 0;
        for (half, group) in [(0usize, &even), (1usize, &odd)] {
            // winds seen by this half: its own copy is free, the other one sets the target
            let (own, other): (&[f64], &[f64]) =
                if half == 0 { (state.omega_interior(), &omega_tilde) } else { (&omega_tilde, state.omega_interior()) };
            let level = |w: &[f64], i: usize| -> Vec<f64> {
                if i == 0 || i == layers {
                    zeros.clone()
                } else {
                    w[(i - 1) * m..i * m].to_vec()
                }
            };
            let slot = |i: usize| -> OmegaSlot {
                if !omega_free || i == 0 || i == layers {
                    return OmegaSlot::Fixed(zeros.clone());
                }
                let o = &other[(i - 1) * m..i * m];
                let u = &u_omega[(i - 1) * m..i * m];
                let target = if half == 0 {
                    o.iter().zip(u).map(|(a, b)| a - b).collect()
                } else {
                    o.iter().zip(u).map(|(a, b)| a + b).collect()
                };
                OmegaSlot::Free { target: Some(target) }
            };
            let mut order: Vec<usize> = group.clone();
            if opts.reverse_order {
                order.reverse();
            }
            let solve = |k: usize| -> Result<(usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, LbfgsResult, usize)> {
                let obj = LayerObjective {
                    model: &model,
                    obs,
                    cfg,
                    k,
                    hydro,
                    u_d: Some(&duals.u_d[k * m..(k + 1) * m]),
                    omega: [slot(k), slot(k + 1)],
                    c_target: Some(&c_target[k * n..(k + 1) * n]),
                    param: opts.param,
                };
                let x0 = obj.pack(state.d_layer(k), &level(own, k), &level(own, k + 1), state.c_layer(k));
                let masks = (it == 0 && opts.multiscale).then(|| obj.stage_masks(&schedule)).transpose()?;
                let (res, its) = inner_solve(&obj, &x0, masks, &opts.inner)?;
                let (d, wa, wb, c) = obj.unpack(&res.x);
                Ok((k, d, wa, wb, c, res, its))
            };
            let mut results: Vec<_> = if opts.parallel {
                order.par_iter().map(|k| solve(*k)).collect::<Result<Vec<_>>>()?
            } else {
                order.iter().map(|k| solve(*k)).collect::<Result<Vec<_>>>()?
            };
            results.sort_by_key(|r| r.0);
            for (k, d, wa, wb, c, res, its) in results {
                inner_total += its;
                if res.status == LbfgsStatus::LineSearchFailed {
                    trace.line_search_failures += 1;
                    log::warn!("outer iteration {it}, layer {k}: inner line search failed, keeping best point");
                }
                state.d[2 * k * m..2 * (k + 1) * m].copy_from_slice(&d);
                state.c[k * n..(k + 1) * n].copy_from_slice(&c);
                if omega_free {
                    let target = if half == 0 { state.omega_interior_mut() } else { &mut omega_tilde[..] };
                    if k >= 1 {
                        target[(k - 1) * m..k * m].copy_from_slice(&wa);
                    }
                    if k + 1 < layers {
                        target[k * m..(k + 1) * m].copy_from_slice(&wb);
                    }
                }
            }
        }

        let c_plus_u: Vec<f64> = state.c.iter().zip(&duals.u_c).map(|(a, b)| a + b).collect();
        let c_tilde_old = std::mem::replace(&mut duals.c_tilde, prox_step(&c_plus_u, &cfg.alpha_x, cfg.rho_c)?);
        for ((u, c), ct) in duals.u_c.iter_mut().zip(&state.c).zip(&duals.c_tilde) {
            *u += c - ct;
        }
        if omega_free {
            for ((u, w), wt) in u_omega.iter_mut().zip(state.omega_interior()).zip(&omega_tilde) {
                *u += w - wt;
            }
        }
        match hydro {
            HydroMode::Hard => {
                // each layer's constraint uses the copy of the winds its subproblem owns
                let dd = apply_d(&state.d, grid, state.shape)?;
                let lw_even = apply_l(state.omega_interior(), layers, m)?;
                let lw_odd = apply_l(&omega_tilde, layers, m)?;
                for k in 0..layers {
                    let lw = if k % 2 == 0 { &lw_even } else { &lw_odd };
                    for j in k * m..(k + 1) * m {
                        duals.u_d[j] += dd[j] - lw[j];
                    }
                }
            }
            _ => duals.u_d.fill(0.0),
        }

        let primal_hydro = relative_hydro(&state, grid, state.omega_interior())?;
        let primal_c = rel_diff(&state.c, &duals.c_tilde);
        let primal_omega = if omega_free { rel_diff(state.omega_interior(), &omega_tilde) } else { 0.0 };
        let dc = c_tilde_old.iter().zip(&duals.c_tilde).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let mut dual = rel(dc, norm(&duals.c_tilde), 0.0);
        if omega_free && it > 0 {
            dual = dual.max(trace_dual_omega(&omega_tilde, &duals.omega_tilde));
        }
        duals.omega_tilde = Some(omega_tilde.clone());
        let objective = problem_objective(&model, obs, cfg, variant, &state, &duals.c_tilde)?;
        trace.records.push(AdmmRecord {
            iteration: it,
            objective,
            primal_hydro,
            primal_c,
            primal_omega,
            dual,
            inner_iterations: inner_total,
            wall_time: t0.elapsed().as_secs_f64(),
        });
        log::debug!(
            "split ADMM {it}: f={objective:.6e} h={primal_hydro:.3e} c={primal_c:.3e} w={primal_omega:.3e} dual={dual:.3e}"
        );
        if !objective.is_finite() {
            return Err(AmvError::NonFiniteObjective);
        }
        if objective > limit {
            return Err(AmvError::DivergenceDetected { iteration: it, value: objective, limit });
        }
        let hydro_ok = hydro != HydroMode::Hard || primal_hydro <= opts.eps_primal;
        if hydro_ok && primal_c <= opts.eps_primal && primal_omega <= opts.eps_primal && dual <= opts.eps_dual {
            trace.converged = true;
            break;
        }
    }
    let dis = disagreement(state.omega_interior(), &omega_tilde);
    duals.omega_tilde = Some(omega_tilde);
    duals.u_omega = Some(u_omega);
    Ok(AdmmOutput { state, duals, trace, omega_disagreement: dis })
}

/// `||new - old|| / ||new||`.
fn trace_dual_omega(new: &[f64], old: &Option<Vec<f64>>) -> f64 {
    match old {
        Some(old) => {
            let d = new.iter().zip(old).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            rel(d, norm(new), 0.0)
        }
        None => 0.0,
    }
}

/// Runs the variant selected in `opts` with the driver selected by `opts.mode`.
pub fn run_variant(
    obs: &ObservationSet,
    grid: &PressureGrid,
    cfg: &SolverConfig,
    opts: &AdmmOptions,
) -> Result<AdmmOutput> {
    match opts.mode {
        AdmmMode::Joint => run_joint_admm(obs, grid, cfg, opts),
        AdmmMode::Split => run_split_admm(obs, grid, cfg, opts),
    }
}
