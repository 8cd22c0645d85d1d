//! Data term, regularisers, constraint penalties and the per-layer and joint
//! subproblem objectives with their analytic gradients.

use crate::diffops::{divergence_acc, divergence_adjoint_acc, laplacian_acc};
use crate::error::{AmvError, Result};
use crate::grid::{AmvState, GridShape, ObservationSet, PhysicsConstants, PressureGrid, Timestamp, CHANNELS};
use crate::lbfgs::Objective;
use crate::spline::SplineEngine;
use crate::wavelet::{default_depth, ScaleSchedule, WaveletBasis, WaveletFamily};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Model weights and numerical settings shared by every solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Laplacian smoothness weight per layer.
    pub alpha_d: Vec<f64>,
    /// Wavelet sparsity weight per layer.
    pub alpha_x: Vec<f64>,
    /// Penalty on the hydrostatic constraint and on the vertical-wind consensus.
    pub rho: f64,
    /// Penalty on the coefficient consensus `c = c~`.
    pub rho_c: f64,
    pub tikhonov: f64,
    pub gamma: PhysicsConstants,
    #[serde(default)]
    pub wavelet: WaveletFamily,
    /// Decomposition depth; `None` picks `log2(min(rows, cols)) - 2`.
    #[serde(default)]
    pub depth: Option<usize>,
    /// Active band counts per coarse-to-fine stage; `None` spreads four stages.
    #[serde(default)]
    pub schedule: Option<Vec<usize>>,
}

impl SolverConfig {
    /// Weights that work on unit-variance images with displacements of a few
    /// pixels and layers about 50 hPa thick.
    pub fn recommended(layers: usize, gamma: PhysicsConstants) -> Self {
        Self::uniform(layers, 0.1, 1e-3, 3e-3, gamma)
    }

    /// Same weights on every layer, `rho_c = 1` and `tikhonov = 1e-8`.
    pub fn uniform(layers: usize, alpha_d: f64, alpha_x: f64, rho: f64, gamma: PhysicsConstants) -> Self {
        Self {
            alpha_d: vec![alpha_d; layers],
            alpha_x: vec![alpha_x; layers],
            rho,
            rho_c: 1.0,
            tikhonov: 1e-8,
            gamma,
            wavelet: WaveletFamily::Coif5,
            depth: None,
            schedule: None,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.alpha_d.len() != layers || self.alpha_x.len() != layers {
            return Err(AmvError::InvalidConfig(format!(
                "alpha_d and alpha_x need {layers} entries, got {} and {}",
                self.alpha_d.len(),
                self.alpha_x.len()
            )));
        }
        if self.alpha_d.iter().chain(&self.alpha_x).any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(AmvError::InvalidConfig("alpha_d and alpha_x must be positive".into()));
        }
        if !(self.tikhonov > f64::EPSILON) {
            return Err(AmvError::InvalidConfig(format!(
                "tikhonov weight must exceed machine epsilon, got {}",
                self.tikhonov
            )));
        }
        if !(self.rho >= 0.0) || !(self.rho_c >= 0.0) {
            return Err(AmvError::InvalidConfig("rho and rho_c must be non-negative".into()));
        }
        self.gamma.check_layers(layers)
    }

    pub fn basis(&self, shape: GridShape) -> Result<WaveletBasis> {
        WaveletBasis::new(self.wavelet, shape, self.depth.unwrap_or_else(|| default_depth(shape)))
    }

    pub fn scale_schedule(&self, basis: &WaveletBasis) -> Result<ScaleSchedule> {
        match &self.schedule {
            Some(stages) => {
                let s = ScaleSchedule::new(stages.clone())?;
                s.active_mask(basis, s.len() - 1)?;
                Ok(s)
            }
            None => Ok(ScaleSchedule::default_for(basis)),
        }
    }
}

/// How the hydrostatic coupling `D d - L w` enters an objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HydroMode {
    Off,
    /// `rho/2 ||D d - L w||^2` with no multiplier.
    Soft,
    /// Augmented-Lagrangian term with the scaled multiplier `u_d`.
    Hard,
}

/// Scaled multipliers and consensus copies.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    /// `K x m`, multiplier of the hydrostatic constraint.
    pub u_d: Vec<f64>,
    /// `K x 3 x m`, multiplier of `c = c~`.
    pub u_c: Vec<f64>,
    /// `K x 3 x m`, sparse consensus copy of the coefficients.
    pub c_tilde: Vec<f64>,
    /// `(K-1) x m`, multiplier of `w = w~` (split mode only).
    pub u_omega: Option<Vec<f64>>,
    /// `(K-1) x m`, odd-half copy of the interior winds (split mode only).
    pub omega_tilde: Option<Vec<f64>>,
}

impl DualState {
    pub fn zeros(shape: GridShape, layers: usize, split: bool) -> Self {
        let m = shape.len();
        let interior = || split.then(|| vec![0.0; (layers - 1) * m]);
        Self {
            u_d: vec![0.0; layers * m],
            u_c: vec![0.0; layers * CHANNELS * m],
            c_tilde: vec![0.0; layers * CHANNELS * m],
            u_omega: interior(),
            omega_tilde: interior(),
        }
    }

    /// `c~ - u_c`, the point the coefficient consensus pulls towards.
    pub fn c_target(&self) -> Vec<f64> {
        self.c_tilde.iter().zip(&self.u_c).map(|(a, b)| a - b).collect()
    }
}

/// Breakdown of an objective value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Terms {
    pub data0: f64,
    pub data1: f64,
    pub reg: f64,
    pub hydro: f64,
    pub consensus: f64,
}

impl Terms {
    pub fn total(&self) -> f64 {
        self.data0 + self.data1 + self.reg + self.hydro + self.consensus
    }

    pub fn data(&self) -> f64 {
        self.data0 + self.data1
    }

    fn add(&mut self, o: &Terms) {
        self.data0 += o.data0;
        self.data1 += o.data1;
        self.reg += o.reg;
        self.hydro += o.hydro;
        self.consensus += o.consensus;
    }
}

/// Shapes, constants and cached transforms for one problem.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub shape: GridShape,
    pub grid: PressureGrid,
    pub gamma: PhysicsConstants,
    pub basis: WaveletBasis,
    spline: std::sync::Arc<SplineEngine>,
    pub dt: f64,
}

/// Coupling terms of one layer objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct Coupling<'a> {
    /// `(rho, u_d^k)`; `None` multiplier means the soft penalty.
    pub hydro: Option<(f64, Option<&'a [f64]>)>,
    /// `(rho_c, c~ - u_c)` for this layer.
    pub c_consensus: Option<(f64, &'a [f64])>,
}

/// Gradient of one layer objective with respect to `(d, w^k, w^{k+1}, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub d: Vec<f64>,
    pub wa: Vec<f64>,
    pub wb: Vec<f64>,
    pub c: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros(m: usize) -> Self {
        Self { d: vec![0.0; 2 * m], wa: vec![0.0; m], wb: vec![0.0; m], c: vec![0.0; CHANNELS * m] }
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

impl ForwardModel {
    pub fn new(shape: GridShape, grid: PressureGrid, gamma: PhysicsConstants, basis: WaveletBasis) -> Result<Self> {
        gamma.check_layers(grid.layers())?;
        if basis.shape() != shape {
            return Err(AmvError::ShapeMismatch("wavelet basis built for a different grid".into()));
        }
        Ok(Self { shape, grid, gamma, basis, spline: std::sync::Arc::new(SplineEngine::new(shape)), dt: 1.0 })
    }

    pub fn from_config(shape: GridShape, grid: PressureGrid, cfg: &SolverConfig) -> Result<Self> {
        let basis = cfg.basis(shape)?;
        Self::new(shape, grid, cfg.gamma.clone(), basis)
    }

    pub fn layers(&self) -> usize {
        self.grid.layers()
    }

    /// Unit of the wind unknowns inside the objectives (the mean layer
    /// thickness), which puts them on the scale of the displacements.
    pub fn omega_scale(&self) -> f64 {
        let inc = self.grid.increments();
        inc.iter().sum::<f64>() / inc.len() as f64
    }

    pub fn spline(&self) -> &SplineEngine {
        &self.spline
    }

    fn check_state(&self, state: &AmvState) -> Result<()> {
        if state.shape != self.shape || state.layers != self.layers() {
            return Err(AmvError::ShapeMismatch(format!(
                "state is {}x{} with {} layers, model {}x{} with {}",
                state.shape.rows,
                state.shape.cols,
                state.layers,
                self.shape.rows,
                self.shape.cols,
                self.layers()
            )));
        }
        Ok(())
    }

    fn check_obs(&self, obs: &ObservationSet) -> Result<()> {
        if obs.shape != self.shape || obs.layers != self.layers() {
            return Err(AmvError::ShapeMismatch("observations do not match the model grid".into()));
        }
        Ok(())
    }

    /// Pixel-domain `t1` image stack `x = Phi c`.
    pub fn image_t1(&self, c: &[f64]) -> Result<Vec<f64>> {
        self.basis.inverse(c)
    }

    /// Warped `t0` prediction of layer `k`.
    pub fn predict_t0(&self, k: usize, x1k: &[f64], dk: &[f64], wa: &[f64], wb: &[f64]) -> Result<Vec<f64>> {
        self.spline.warp_layer(x1k, dk, wa, wb, self.gamma.gamma[k], self.gamma.gamma[k + 1], self.dt)
    }

    /// Masked residual, laid out as `[t0 (K x 3 x m) | t1 (K x 3 x m)]`.
    pub fn residual(&self, state: &AmvState, obs: &ObservationSet) -> Result<Vec<f64>> {
        self.check_state(state)?;
        self.check_obs(obs)?;
        let (k_layers, m) = (self.layers(), self.shape.len());
        let n = CHANNELS * m;
        let x1 = self.image_t1(&state.c)?;
        let mut out = vec![0.0; 2 * k_layers * n];
        for k in 0..k_layers {
            let x1k = &x1[k * n..(k + 1) * n];
            let pred =
                self.predict_t0(k, x1k, state.d_layer(k), state.omega_level(k), state.omega_level(k + 1))?;
            for (time, pred, base) in [(Timestamp::T0, &pred[..], k * n), (Timestamp::T1, x1k, (k_layers + k) * n)] {
                let mask = obs.mask(time, k);
                let y = obs.y_layer(time, k);
                for l in 0..CHANNELS {
                    for j in 0..m {
                        if mask[j] {
                            out[base + l * m + j] = pred[l * m + j] - y[l * m + j];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// `1/2 ||residual||^2`.
    pub fn data_term(&self, state: &AmvState, obs: &ObservationSet) -> Result<f64> {
        Ok(0.5 * sq(&self.residual(state, obs)?))
    }

    /// Value (and optionally gradient) of layer `k`'s smooth objective at
    /// pixel-domain displacement `d`, boundary winds `wa = w^k`, `wb = w^{k+1}`
    /// and coefficients `c`.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_terms(
        &self,
        obs: &ObservationSet,
        cfg: &SolverConfig,
        k: usize,
        d: &[f64],
        wa: &[f64],
        wb: &[f64],
        c: &[f64],
        coupling: &Coupling<'_>,
        mut grad: Option<&mut LayerGrad>,
    ) -> Terms {
        let m = self.shape.len();
        let n = CHANNELS * m;
        let mut t = Terms::default();
        let x = self.basis.inverse(c).expect("layer coefficients hold whole planes");
        let mut gx = vec![0.0; n];

        let mask1 = obs.mask(Timestamp::T1, k);
        let y1 = obs.y_layer(Timestamp::T1, k);
        for l in 0..CHANNELS {
            for j in 0..m {
                if mask1[j] {
                    let r = x[l * m + j] - y1[l * m + j];
                    t.data1 += 0.5 * r * r;
                    gx[l * m + j] = r;
                }
            }
        }

        let mut coeffs = vec![0.0; n];
        for l in 0..CHANNELS {
            self.spline.prefilter_into(&x[l * m..(l + 1) * m], &mut coeffs[l * m..(l + 1) * m]);
        }
        let mut pred = vec![0.0; n];
        let mut sgrad = grad.as_ref().map(|_| vec![0.0; 2 * n]);
        self.spline.sample_layer(&coeffs, d, &mut pred, sgrad.as_deref_mut());
        let (ga, gb) = (self.gamma.gamma[k], self.gamma.gamma[k + 1]);
        let half_dt = 0.5 * self.dt;
        let mask0 = obs.mask(Timestamp::T0, k);
        let y0 = obs.y_layer(Timestamp::T0, k);
        let mut r0 = vec![0.0; n];
        for l in 0..CHANNELS {
            for j in 0..m {
                if mask0[j] {
                    let v = pred[l * m + j] - half_dt * (ga[l] * wa[j] + gb[l] * wb[j]) - y0[l * m + j];
                    t.data0 += 0.5 * v * v;
                    r0[l * m + j] = v;
                }
            }
        }

        let lap = |u: &[f64]| {
            let mut o = vec![0.0; m];
            laplacian_acc(self.shape, u, 1.0, &mut o);
            o
        };
        let alpha = cfg.alpha_d[k];
        let lx = lap(&d[..m]);
        let ly = lap(&d[m..]);
        t.reg = 0.5 * alpha * (sq(&lx) + sq(&ly)) + cfg.tikhonov * sq(d);

        let mut h = Vec::new();
        if let Some((rho, u)) = coupling.hydro {
            h = vec![0.0; m];
            divergence_acc(self.shape, d, self.grid.increments()[k], &mut h);
            for j in 0..m {
                h[j] += wb[j] - wa[j] + u.map_or(0.0, |u| u[j]);
            }
            t.hydro = 0.5 * rho * sq(&h);
        }

        if let Some((rho_c, target)) = coupling.c_consensus {
            t.consensus = 0.5 * rho_c * c.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }

        let Some(g) = grad.as_mut() else {
            return t;
        };
        let sgrad = sgrad.expect("allocated with grad");
        g.d.fill(0.0);
        g.wa.fill(0.0);
        g.wb.fill(0.0);
        for l in 0..CHANNELS {
            for j in 0..m {
                let r = r0[l * m + j];
                if r != 0.0 {
                    g.d[j] += r * sgrad[2 * l * m + j];
                    g.d[m + j] += r * sgrad[(2 * l + 1) * m + j];
                    g.wa[j] -= half_dt * ga[l] * r;
                    g.wb[j] -= half_dt * gb[l] * r;
                }
            }
        }
        let mut scattered = vec![0.0; n];
        self.spline.scatter_layer(&r0, d, &mut scattered);
        let mut back = vec![0.0; m];
        for l in 0..CHANNELS {
            self.spline.prefilter_into(&scattered[l * m..(l + 1) * m], &mut back);
            gx[l * m..(l + 1) * m].iter_mut().zip(&back).for_each(|(a, b)| *a += b);
        }
        laplacian_acc(self.shape, &lx, alpha, &mut g.d[..m]);
        laplacian_acc(self.shape, &ly, alpha, &mut g.d[m..]);
        g.d.iter_mut().zip(d).for_each(|(a, b)| *a += 2.0 * cfg.tikhonov * b);
        if let Some((rho, _)) = coupling.hydro {
            divergence_adjoint_acc(self.shape, &h, rho * self.grid.increments()[k], &mut g.d);
            for j in 0..m {
                g.wa[j] -= rho * h[j];
                g.wb[j] += rho * h[j];
            }
        }
        g.c = self.basis.forward(&gx).expect("whole planes");
        if let Some((rho_c, target)) = coupling.c_consensus {
            for ((gc, a), b) in g.c.iter_mut().zip(c).zip(target) {
                *gc += rho_c * (a - b);
            }
        }
        t
    }

    /// Smooth part of the problem at `state`: data, regularisation, and the
    /// soft hydrostatic penalty when `soft_rho` is given.
    pub fn smooth_energy(
        &self,
        state: &AmvState,
        obs: &ObservationSet,
        cfg: &SolverConfig,
        soft_rho: Option<f64>,
    ) -> Result<Terms> {
        self.check_state(state)?;
        self.check_obs(obs)?;
        let mut total = Terms::default();
        for k in 0..self.layers() {
            let coupling = Coupling { hydro: soft_rho.map(|r| (r, None)), c_consensus: None };
            let t = self.layer_terms(
                obs,
                cfg,
                k,
                state.d_layer(k),
                state.omega_level(k),
                state.omega_level(k + 1),
                state.c_layer(k),
                &coupling,
                None,
            );
            total.add(&t);
        }
        Ok(total)
    }
}

/// `sum_k alpha_d^k / 2 (||lap dx^k||^2 + ||lap dy^k||^2) + tikhonov ||d||^2`.
pub fn reg_d(d: &[f64], alpha_d: &[f64], tikhonov: f64, shape: GridShape) -> Result<f64> {
    let m = shape.len();
    if d.len() != 2 * m * alpha_d.len() {
        return Err(AmvError::ShapeMismatch(format!(
            "reg_d: {} displacement entries for {} layers",
            d.len(),
            alpha_d.len()
        )));
    }
    let mut total = tikhonov * sq(d);
    for (k, a) in alpha_d.iter().enumerate() {
        for comp in 0..2 {
            let mut o = vec![0.0; m];
            laplacian_acc(shape, &d[(2 * k + comp) * m..(2 * k + comp + 1) * m], 1.0, &mut o);
            total += 0.5 * a * sq(&o);
        }
    }
    Ok(total)
}

/// `sum_k alpha_x^k ||c^k||_1`.
pub fn l1_term(c: &[f64], alpha_x: &[f64]) -> f64 {
    let block = c.len() / alpha_x.len().max(1);
    c.chunks(block).zip(alpha_x).map(|(ch, a)| a * ch.iter().map(|v| v.abs()).sum::<f64>()).sum()
}

/// How the displacement unknowns are parameterised in an objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisplacementParam {
    Pixel,
    /// `d = Phi a`, one coefficient plane per component.
    Wavelet,
}

fn d_from_param(model: &ForwardModel, param: DisplacementParam, x: &[f64]) -> Vec<f64> {
    match param {
        DisplacementParam::Pixel => x.to_vec(),
        DisplacementParam::Wavelet => model.basis.inverse(x).expect("whole planes"),
    }
}

fn d_grad_to_param(model: &ForwardModel, param: DisplacementParam, g: &[f64]) -> Vec<f64> {
    match param {
        DisplacementParam::Pixel => g.to_vec(),
        DisplacementParam::Wavelet => model.basis.forward(g).expect("whole planes"),
    }
}

/// Maps pixel-domain displacements into the objective's parameterisation.
pub fn d_to_param(model: &ForwardModel, param: DisplacementParam, d: &[f64]) -> Vec<f64> {
    d_grad_to_param(model, param, d)
}

/// Whole-stack objective `sum_k F_k` with shared vertical winds, as minimised
/// by the joint ADMM primal step.
pub struct JointObjective<'a> {
    pub model: &'a ForwardModel,
    pub obs: &'a ObservationSet,
    pub cfg: &'a SolverConfig,
    pub hydro: HydroMode,
    /// Whether the interior winds are unknowns (`false` pins them at zero).
    pub omega_free: bool,
    /// `K x m` multiplier used in hard mode.
    pub u_d: &'a [f64],
    /// `c~ - u_c`, or `None` to drop the coefficient consensus.
    pub c_target: Option<&'a [f64]>,
    pub param: DisplacementParam,
    pub parallel: bool,
}

impl JointObjective<'_> {
    fn sizes(&self) -> (usize, usize, usize) {
        let (k, m) = (self.model.layers(), self.model.shape.len());
        let nd = 2 * k * m;
        let nw = if self.omega_free { (k - 1) * m } else { 0 };
        (nd, nw, CHANNELS * k * m)
    }

    /// Packs a state into the objective's variable vector.
    pub fn pack(&self, state: &AmvState) -> Vec<f64> {
        let mut x = d_to_param(self.model, self.param, &state.d);
        if self.omega_free {
            let s = self.model.omega_scale();
            x.extend(state.omega_interior().iter().map(|w| w / s));
        }
        x.extend_from_slice(&state.c);
        x
    }

    /// Writes a variable vector back into `state`.
    pub fn unpack_into(&self, x: &[f64], state: &mut AmvState) {
        let (nd, nw, _) = self.sizes();
        state.d = d_from_param(self.model, self.param, &x[..nd]);
        if self.omega_free {
            let s = self.model.omega_scale();
            state.omega_interior_mut().iter_mut().zip(&x[nd..nd + nw]).for_each(|(w, v)| *w = s * v);
        } else {
            state.omega.fill(0.0);
        }
        state.c.copy_from_slice(&x[nd + nw..]);
    }

    /// Per-variable activity for each stage of `schedule`; the schedule only
    /// restricts displacement coefficients.
    pub fn stage_masks(&self, schedule: &ScaleSchedule) -> Result<Vec<Vec<bool>>> {
        let (nd, nw, nc) = self.sizes();
        (0..schedule.len())
            .map(|s| {
                let band = schedule.active_mask(&self.model.basis, s)?;
                let m = band.len();
                let mut mask = Vec::with_capacity(nd + nw + nc);
                match self.param {
                    DisplacementParam::Wavelet => mask.extend((0..nd).map(|i| band[i % m])),
                    DisplacementParam::Pixel => mask.extend(std::iter::repeat_n(true, nd)),
                }
                mask.extend(std::iter::repeat_n(true, nw));
                mask.extend(std::iter::repeat_n(true, nc));
                Ok(mask)
            })
            .collect()
    }

    /// Value and gradient with a term breakdown.
    pub fn eval_terms(&self, x: &[f64], grad: Option<&mut [f64]>) -> Terms {
        let (k_layers, m) = (self.model.layers(), self.model.shape.len());
        let (nd, nw, _) = self.sizes();
        let d = d_from_param(self.model, self.param, &x[..nd]);
        let zeros = vec![0.0; m];
        let scale = self.model.omega_scale();
        let omega: Vec<f64> = x[nd..nd + nw].iter().map(|v| scale * v).collect();
        let omega_at = |level: usize| -> &[f64] {
            if self.omega_free && level >= 1 && level < k_layers {
                &omega[(level - 1) * m..level * m]
            } else {
                &zeros
            }
        };
        let want_grad = grad.is_some();
        let rho = self.cfg.rho;
        let run = |k: usize| {
            let n = CHANNELS * m;
            let coupling = Coupling {
                hydro: match self.hydro {
                    HydroMode::Off => None,
                    HydroMode::Soft => Some((rho, None)),
                    HydroMode::Hard => Some((rho, Some(&self.u_d[k * m..(k + 1) * m]))),
                },
                c_consensus: self.c_target.map(|t| (self.cfg.rho_c, &t[k * n..(k + 1) * n])),
            };
            let mut g = want_grad.then(|| LayerGrad::zeros(m));
            let t = self.model.layer_terms(
                self.obs,
                self.cfg,
                k,
                &d[2 * k * m..2 * (k + 1) * m],
                omega_at(k),
                omega_at(k + 1),
                &x[nd + nw + k * n..nd + nw + (k + 1) * n],
                &coupling,
                g.as_mut(),
            );
            (t, g)
        };
        let per_layer: Vec<(Terms, Option<LayerGrad>)> = if self.parallel {
            (0..k_layers).into_par_iter().map(run).collect()
        } else {
            (0..k_layers).map(run).collect()
        };
        let mut total = Terms::default();
        for (t, _) in &per_layer {
            total.add(t);
        }
        if let Some(grad) = grad {
            let n = CHANNELS * m;
            let mut gd = vec![0.0; nd];
            grad[nd..].fill(0.0);
            for (k, (_, g)) in per_layer.iter().enumerate() {
                let g = g.as_ref().expect("gradient requested");
                gd[2 * k * m..2 * (k + 1) * m].copy_from_slice(&g.d);
                if self.omega_free {
                    if k >= 1 {
                        let dst = &mut grad[nd + (k - 1) * m..nd + k * m];
                        dst.iter_mut().zip(&g.wa).for_each(|(a, b)| *a += scale * b);
                    }
                    if k + 1 < k_layers {
                        let dst = &mut grad[nd + k * m..nd + (k + 1) * m];
                        dst.iter_mut().zip(&g.wb).for_each(|(a, b)| *a += scale * b);
                    }
                }
                grad[nd + nw + k * n..nd + nw + (k + 1) * n].copy_from_slice(&g.c);
            }
            grad[..nd].copy_from_slice(&d_grad_to_param(self.model, self.param, &gd));
        }
        total
    }
}

impl Objective for JointObjective<'_> {
    fn dim(&self) -> usize {
        let (a, b, c) = self.sizes();
        a + b + c
    }

    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.eval_terms(x, Some(grad)).total()
    }
}

/// One boundary wind of a layer objective.
#[derive(Debug, Clone, PartialEq)]
pub enum OmegaSlot {
    /// Held at the given values.
    Fixed(Vec<f64>),
    /// An unknown, optionally pulled towards a consensus target with weight `rho`.
    Free { target: Option<Vec<f64>> },
}

/// Objective of one layer's subproblem over `(d^k, free boundary winds, c^k)`.
/// With consensus targets on the winds it is the even (`G`) or odd (`G~`)
/// split subproblem; without them it is the single-layer `F_k`.
pub struct LayerObjective<'a> {
    pub model: &'a ForwardModel,
    pub obs: &'a ObservationSet,
    pub cfg: &'a SolverConfig,
    pub k: usize,
    pub hydro: HydroMode,
    /// `m` entries of `u_d` for this layer, used in hard mode.
    pub u_d: Option<&'a [f64]>,
    pub omega: [OmegaSlot; 2],
    /// `c~ - u_c` for this layer.
    pub c_target: Option<&'a [f64]>,
    pub param: DisplacementParam,
}

impl LayerObjective<'_> {
    fn free_count(&self) -> usize {
        self.omega.iter().filter(|s| matches!(s, OmegaSlot::Free { .. })).count()
    }

    /// Packs pixel-domain `(d, w^k, w^{k+1}, c)` into the variable vector;
    /// fixed winds are skipped.
    pub fn pack(&self, d: &[f64], wa: &[f64], wb: &[f64], c: &[f64]) -> Vec<f64> {
        let mut x = d_to_param(self.model, self.param, d);
        for (slot, w) in self.omega.iter().zip([wa, wb]) {
            if matches!(slot, OmegaSlot::Free { .. }) {
                let s = self.model.omega_scale();
                x.extend(w.iter().map(|v| v / s));
            }
        }
        x.extend_from_slice(c);
        x
    }

    /// Returns pixel-domain `(d, w^k, w^{k+1}, c)`.
    pub fn unpack(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let m = self.model.shape.len();
        let d = d_from_param(self.model, self.param, &x[..2 * m]);
        let mut off = 2 * m;
        let mut w = [Vec::new(), Vec::new()];
        for (i, slot) in self.omega.iter().enumerate() {
            w[i] = match slot {
                OmegaSlot::Fixed(v) => v.clone(),
                OmegaSlot::Free { .. } => {
                    off += m;
                    let s = self.model.omega_scale();
                    x[off - m..off].iter().map(|v| s * v).collect()
                }
            };
        }
        let [wa, wb] = w;
        (d, wa, wb, x[off..].to_vec())
    }

    pub fn stage_masks(&self, schedule: &ScaleSchedule) -> Result<Vec<Vec<bool>>> {
        let m = self.model.shape.len();
        let nw = self.free_count() * m;
        (0..schedule.len())
            .map(|s| {
                let band = schedule.active_mask(&self.model.basis, s)?;
                let mut mask = Vec::with_capacity(self.dim());
                match self.param {
                    DisplacementParam::Wavelet => mask.extend((0..2 * m).map(|i| band[i % m])),
                    DisplacementParam::Pixel => mask.extend(std::iter::repeat_n(true, 2 * m)),
                }
                mask.extend(std::iter::repeat_n(true, nw));
                mask.extend(std::iter::repeat_n(true, CHANNELS * m));
                Ok(mask)
            })
            .collect()
    }

    pub fn eval_terms(&self, x: &[f64], grad: Option<&mut [f64]>) -> Terms {
        let m = self.model.shape.len();
        let (d, wa, wb, c) = self.unpack(x);
        let coupling = Coupling {
            hydro: match self.hydro {
                HydroMode::Off => None,
                HydroMode::Soft => Some((self.cfg.rho, None)),
                HydroMode::Hard => Some((self.cfg.rho, self.u_d)),
            },
            c_consensus: self.c_target.map(|t| (self.cfg.rho_c, t)),
        };
        let mut lg = grad.as_ref().map(|_| LayerGrad::zeros(m));
        let mut t = self.model.layer_terms(self.obs, self.cfg, self.k, &d, &wa, &wb, &c, &coupling, lg.as_mut());
        let rho = self.cfg.rho;
        let mut wgrads = [None, None];
        for (i, (slot, w)) in self.omega.iter().zip([&wa, &wb]).enumerate() {
            if let OmegaSlot::Free { target: Some(tgt) } = slot {
                t.consensus += 0.5 * rho * w.iter().zip(tgt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                wgrads[i] = Some(w.iter().zip(tgt).map(|(a, b)| rho * (a - b)).collect::<Vec<f64>>());
            }
        }
        if let (Some(grad), Some(lg)) = (grad, lg) {
            grad[..2 * m].copy_from_slice(&d_grad_to_param(self.model, self.param, &lg.d));
            let mut off = 2 * m;
            for (i, (slot, g)) in self.omega.iter().zip([&lg.wa, &lg.wb]).enumerate() {
                if matches!(slot, OmegaSlot::Free { .. }) {
                    let dst = &mut grad[off..off + m];
                    dst.copy_from_slice(g);
                    if let Some(extra) = &wgrads[i] {
                        dst.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
                    }
                    let s = self.model.omega_scale();
                    dst.iter_mut().for_each(|a| *a *= s);
                    off += m;
                }
            }
            grad[off..].copy_from_slice(&lg.c);
        }
        t
    }
}

impl Objective for LayerObjective<'_> {
    fn dim(&self) -> usize {
        (2 + self.free_count() + CHANNELS) * self.model.shape.len()
    }

    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.eval_terms(x, Some(grad)).total()
    }
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub max_rel_error: f64,
    pub errors: Vec<f64>,
}

/// Compares the analytic directional derivative with a central difference
/// along `trials` random unit directions.
pub fn gradient_check(obj: &dyn Objective, x: &[f64], step: f64, trials: usize, seed: u64) -> GradientReport {
    let n = obj.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = vec![0.0; n];
    obj.eval(x, &mut g);
    let mut scratch = vec![0.0; n];
    let mut errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = sq(&v).sqrt().max(1e-300);
        v.iter_mut().for_each(|e| *e /= norm);
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + step * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - step * b).collect();
        let fd = (obj.eval(&xp, &mut scratch) - obj.eval(&xm, &mut scratch)) / (2.0 * step);
        let an: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        let scale = fd.abs().max(an.abs());
        errors.push(if scale < 1e-14 { 0.0 } else { (fd - an).abs() / scale });
    }
    GradientReport { max_rel_error: errors.iter().copied().fold(0.0, f64::max), errors }
}
