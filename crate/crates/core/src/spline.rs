//! Periodic cubic cardinal-spline interpolation and the layer warp operator.
//!
//! Images are interpolated by cubic B-splines whose coefficients come from an
//! exact periodic prefilter (a division in the Fourier domain), so the
//! interpolant passes through every grid sample. The warp of a layer samples
//! the `t1` spline surface at `x + d(x)` and subtracts the vertical-wind
//! source term `dt/2 (gamma^k w^k + gamma^{k+1} w^{k+1})`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{AmvError, Result};
use crate::grid::{GridShape, CHANNELS};

/// Cubic B-spline coefficient plane for one channel of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SplinePlane {
    pub shape: GridShape,
    pub coeffs: Vec<f64>,
}

/// Cubic B-spline weights for offsets `-1, 0, 1, 2` at fractional position `t`.
#[inline]
pub fn bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let u = 1.0 - t;
    [
        u * u * u / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Derivatives of [`bspline_weights`] with respect to `t`.
#[inline]
pub fn bspline_weight_derivs(t: f64) -> [f64; 4] {
    let u = 1.0 - t;
    [-0.5 * u * u, 1.5 * t * t - 2.0 * t, -1.5 * t * t + t + 0.5, 0.5 * t * t]
}

/// Support of the spline around a point: wrapped indices and weights.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    cols: [usize; 4],
    rows: [usize; 4],
    wx: [f64; 4],
    wy: [f64; 4],
    dwx: [f64; 4],
    dwy: [f64; 4],
}

impl Stencil {
    #[inline]
    fn at(shape: GridShape, x: f64, y: f64) -> Self {
        let fx = x.floor();
        let fy = y.floor();
        let tx = x - fx;
        let ty = y - fy;
        let ix = fx as i64;
        let iy = fy as i64;
        let nc = shape.cols as i64;
        let nr = shape.rows as i64;
        let mut cols = [0usize; 4];
        let mut rows = [0usize; 4];
        for a in 0..4 {
            cols[a] = (ix + a as i64 - 1).rem_euclid(nc) as usize;
            rows[a] = (iy + a as i64 - 1).rem_euclid(nr) as usize;
        }
        Self {
            cols,
            rows,
            wx: bspline_weights(tx),
            wy: bspline_weights(ty),
            dwx: bspline_weight_derivs(tx),
            dwy: bspline_weight_derivs(ty),
        }
    }

    #[inline]
    fn value(&self, coeffs: &[f64], cols: usize) -> f64 {
        let mut acc = 0.0;
        for b in 0..4 {
            let row = &coeffs[self.rows[b] * cols..(self.rows[b] + 1) * cols];
            let mut s = 0.0;
            for a in 0..4 {
                s += self.wx[a] * row[self.cols[a]];
            }
            acc += self.wy[b] * s;
        }
        acc
    }

    /// Value and spatial gradient `(d/dx, d/dy)`.
    #[inline]
    fn value_grad(&self, coeffs: &[f64], cols: usize) -> (f64, f64, f64) {
        let (mut v, mut gx, mut gy) = (0.0, 0.0, 0.0);
        for b in 0..4 {
            let row = &coeffs[self.rows[b] * cols..(self.rows[b] + 1) * cols];
            let (mut s, mut ds) = (0.0, 0.0);
            for a in 0..4 {
                let c = row[self.cols[a]];
                s += self.wx[a] * c;
                ds += self.dwx[a] * c;
            }
            v += self.wy[b] * s;
            gx += self.wy[b] * ds;
            gy += self.dwy[b] * s;
        }
        (v, gx, gy)
    }

    #[inline]
    fn scatter(&self, weight: f64, out: &mut [f64], cols: usize) {
        for b in 0..4 {
            let wb = weight * self.wy[b];
            let row = &mut out[self.rows[b] * cols..(self.rows[b] + 1) * cols];
            for a in 0..4 {
                row[self.cols[a]] += wb * self.wx[a];
            }
        }
    }
}

/// Cached FFT plans and prefilter denominators for one grid shape.
pub struct SplineEngine {
    shape: GridShape,
    fft_row: Arc<dyn Fft<f64>>,
    ifft_row: Arc<dyn Fft<f64>>,
    fft_col: Arc<dyn Fft<f64>>,
    ifft_col: Arc<dyn Fft<f64>>,
    inv_row: Vec<f64>,
    inv_col: Vec<f64>,
}

impl std::fmt::Debug for SplineEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SplineEngine").field("shape", &self.shape).finish()
    }
}

/// `1 / B(u)` with `B(u) = (4 + 2 cos(2 pi u / n)) / 6`, normalised by `1/n`
/// for the unscaled inverse FFT.
fn prefilter_denominators(n: usize) -> Vec<f64> {
    (0..n)
        .map(|u| {
            let b = (4.0 + 2.0 * (2.0 * std::f64::consts::PI * u as f64 / n as f64).cos()) / 6.0;
            1.0 / (b * n as f64)
        })
        .collect()
}

impl SplineEngine {
    pub fn new(shape: GridShape) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            shape,
            fft_row: planner.plan_fft_forward(shape.cols),
            ifft_row: planner.plan_fft_inverse(shape.cols),
            fft_col: planner.plan_fft_forward(shape.rows),
            ifft_col: planner.plan_fft_inverse(shape.rows),
            inv_row: prefilter_denominators(shape.cols),
            inv_col: prefilter_denominators(shape.rows),
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    fn check(&self, len: usize, what: &str) -> Result<()> {
        if len != self.shape.len() {
            return Err(AmvError::ShapeMismatch(format!(
                "{what}: expected {} samples, got {len}",
                self.shape.len()
            )));
        }
        Ok(())
    }

    /// Cardinal-spline coefficients of `plane` under periodic boundaries.
    /// The operator is a symmetric circulant, so it is also its own adjoint.
    pub fn prefilter_into(&self, plane: &[f64], out: &mut [f64]) {
        let (rows, cols) = (self.shape.rows, self.shape.cols);
        let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft_row.process(&mut buf);
        for r in 0..rows {
            for (c, z) in buf[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                *z *= self.inv_row[c];
            }
        }
        self.ifft_row.process(&mut buf);
        let mut col_buf = vec![Complex64::new(0.0, 0.0); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                col_buf[c * rows + r] = buf[r * cols + c];
            }
        }
        self.fft_col.process(&mut col_buf);
        for c in 0..cols {
            for (r, z) in col_buf[c * rows..(c + 1) * rows].iter_mut().enumerate() {
                *z *= self.inv_col[r];
            }
        }
        self.ifft_col.process(&mut col_buf);
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = col_buf[c * rows + r].re;
            }
        }
    }

    pub fn prefilter(&self, plane: &[f64]) -> Result<SplinePlane> {
        self.check(plane.len(), "prefilter")?;
        if plane.iter().any(|v| !v.is_finite()) {
            return Err(AmvError::ShapeMismatch("prefilter input must be finite".into()));
        }
        let mut coeffs = vec![0.0; plane.len()];
        self.prefilter_into(plane, &mut coeffs);
        Ok(SplinePlane { shape: self.shape, coeffs })
    }

    /// Warp of one layer: `out_l(j) = s_l(pos(j) + d(j)) - dt/2 (g^k_l w^k(j) + g^{k+1}_l w^{k+1}(j))`.
    #[allow(clippy::too_many_arguments)]
    pub fn warp_layer(
        &self,
        x1k: &[f64],
        dk: &[f64],
        wk: &[f64],
        wk1: &[f64],
        gamma_k: [f64; CHANNELS],
        gamma_k1: [f64; CHANNELS],
        dt: f64,
    ) -> Result<Vec<f64>> {
        let m = self.shape.len();
        self.check_layer_args(x1k, dk, wk, wk1)?;
        let mut coeffs = vec![0.0; CHANNELS * m];
        for l in 0..CHANNELS {
            self.prefilter_into(&x1k[l * m..(l + 1) * m], &mut coeffs[l * m..(l + 1) * m]);
        }
        let mut out = vec![0.0; CHANNELS * m];
        self.sample_layer(&coeffs, dk, &mut out, None);
        for l in 0..CHANNELS {
            for j in 0..m {
                out[l * m + j] -= 0.5 * dt * (gamma_k[l] * wk[j] + gamma_k1[l] * wk1[j]);
            }
        }
        Ok(out)
    }

    fn check_layer_args(&self, x1k: &[f64], dk: &[f64], wk: &[f64], wk1: &[f64]) -> Result<()> {
        let m = self.shape.len();
        if x1k.len() != CHANNELS * m || dk.len() != 2 * m || wk.len() != m || wk1.len() != m {
            return Err(AmvError::ShapeMismatch(format!(
                "warp expects (3m, 2m, m, m) = ({}, {}, {m}, {m}), got ({}, {}, {}, {})",
                CHANNELS * m,
                2 * m,
                x1k.len(),
                dk.len(),
                wk.len(),
                wk1.len()
            )));
        }
        Ok(())
    }

    /// Samples the three coefficient planes at `pos(j) + d(j)`. When
    /// `grad` is given it receives the spatial gradients, laid out as
    /// `[channel][x|y][j]` (`6m` entries).
    pub fn sample_layer(&self, coeffs: &[f64], dk: &[f64], out: &mut [f64], mut grad: Option<&mut [f64]>) {
        let m = self.shape.len();
        let cols = self.shape.cols;
        for j in 0..m {
            let (px, py) = self.shape.position(j);
            let st = Stencil::at(self.shape, px + dk[j], py + dk[m + j]);
            for l in 0..CHANNELS {
                let plane = &coeffs[l * m..(l + 1) * m];
                match grad.as_deref_mut() {
                    Some(g) => {
                        let (v, gx, gy) = st.value_grad(plane, cols);
                        out[l * m + j] = v;
                        g[(2 * l) * m + j] = gx;
                        g[(2 * l + 1) * m + j] = gy;
                    }
                    None => out[l * m + j] = st.value(plane, cols),
                }
            }
        }
    }

    /// Transpose of [`Self::sample_layer`] with respect to the coefficients:
    /// spreads `weights` (3m) onto the coefficient grid.
    pub fn scatter_layer(&self, weights: &[f64], dk: &[f64], out: &mut [f64]) {
        let m = self.shape.len();
        let cols = self.shape.cols;
        for j in 0..m {
            if (0..CHANNELS).all(|l| weights[l * m + j] == 0.0) {
                continue;
            }
            let (px, py) = self.shape.position(j);
            let st = Stencil::at(self.shape, px + dk[j], py + dk[m + j]);
            for l in 0..CHANNELS {
                let w = weights[l * m + j];
                if w != 0.0 {
                    st.scatter(w, &mut out[l * m..(l + 1) * m], cols);
                }
            }
        }
    }

    /// Jacobian-vector product of [`Self::warp_layer`] at `(x1k, dk, wk, wk1)`
    /// along the tangent `(tx, td, twk, twk1)`.
    #[allow(clippy::too_many_arguments)]
    pub fn warp_jvp(
        &self,
        x1k: &[f64],
        dk: &[f64],
        wk: &[f64],
        wk1: &[f64],
        tangent: (&[f64], &[f64], &[f64], &[f64]),
        gamma_k: [f64; CHANNELS],
        gamma_k1: [f64; CHANNELS],
        dt: f64,
    ) -> Result<Vec<f64>> {
        let (tx, td, twk, twk1) = tangent;
        self.check_layer_args(x1k, dk, wk, wk1)?;
        self.check_layer_args(tx, td, twk, twk1)?;
        let m = self.shape.len();
        let mut coeffs = vec![0.0; CHANNELS * m];
        let mut tcoeffs = vec![0.0; CHANNELS * m];
        for l in 0..CHANNELS {
            self.prefilter_into(&x1k[l * m..(l + 1) * m], &mut coeffs[l * m..(l + 1) * m]);
            self.prefilter_into(&tx[l * m..(l + 1) * m], &mut tcoeffs[l * m..(l + 1) * m]);
        }
        let mut vals = vec![0.0; CHANNELS * m];
        let mut grad = vec![0.0; 2 * CHANNELS * m];
        self.sample_layer(&coeffs, dk, &mut vals, Some(&mut grad));
        let mut out = vec![0.0; CHANNELS * m];
        self.sample_layer(&tcoeffs, dk, &mut out, None);
        for l in 0..CHANNELS {
            for j in 0..m {
                out[l * m + j] += grad[2 * l * m + j] * td[j] + grad[(2 * l + 1) * m + j] * td[m + j]
                    - 0.5 * dt * (gamma_k[l] * twk[j] + gamma_k1[l] * twk1[j]);
            }
        }
        Ok(out)
    }
}

/// Cardinal-spline coefficients of one plane.
pub fn prefilter(plane: &[f64], shape: GridShape) -> Result<SplinePlane> {
    SplineEngine::new(shape).prefilter(plane)
}

/// Value of the spline surface at `(x, y)`, wrapped periodically.
pub fn interp(spline: &SplinePlane, x: f64, y: f64) -> f64 {
    Stencil::at(spline.shape, x, y).value(&spline.coeffs, spline.shape.cols)
}

/// Value and spatial gradient of the spline surface at `(x, y)`.
pub fn interp_grad(spline: &SplinePlane, x: f64, y: f64) -> (f64, f64, f64) {
    Stencil::at(spline.shape, x, y).value_grad(&spline.coeffs, spline.shape.cols)
}

/// One-shot warp; see [`SplineEngine::warp_layer`].
#[allow(clippy::too_many_arguments)]
pub fn warp_layer(
    shape: GridShape,
    x1k: &[f64],
    dk: &[f64],
    wk: &[f64],
    wk1: &[f64],
    gamma_k: [f64; CHANNELS],
    gamma_k1: [f64; CHANNELS],
    dt: f64,
) -> Result<Vec<f64>> {
    SplineEngine::new(shape).warp_layer(x1k, dk, wk, wk1, gamma_k, gamma_k1, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Closed-form cubic B-spline kernel, written independently of the
    /// polynomial weight table above.
    fn beta3(x: f64) -> f64 {
        let a = x.abs();
        if a < 1.0 {
            2.0 / 3.0 - a * a + a * a * a / 2.0
        } else if a < 2.0 {
            (2.0 - a).powi(3) / 6.0
        } else {
            0.0
        }
    }

    #[test]
    fn constant_plane_is_reproduced() {
        let shape = GridShape::new(8, 16).unwrap();
        let s = prefilter(&vec![7.0; shape.len()], shape).unwrap();
        assert!(s.coeffs.iter().all(|c| (c - 7.0).abs() < 1e-12));
        for (x, y) in [(0.3, 0.7), (5.5, 2.25), (-3.1, 9.9)] {
            assert!((interp(&s, x, y) - 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_is_cardinal() {
        let shape = GridShape::square(16).unwrap();
        let mut plane = vec![0.0; shape.len()];
        let j0 = shape.index(5, 9);
        plane[j0] = 1.0;
        let s = prefilter(&plane, shape).unwrap();
        for j in 0..shape.len() {
            let (x, y) = shape.position(j);
            let expect = if j == j0 { 1.0 } else { 0.0 };
            assert!((interp(&s, x, y) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn nodes_reproduce_samples() {
        let shape = GridShape::new(16, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plane = random_plane(shape.len(), &mut rng);
        let s = prefilter(&plane, shape).unwrap();
        for j in 0..shape.len() {
            let (x, y) = shape.position(j);
            let v = interp(&s, x, y);
            assert!((v - plane[j]).abs() <= 1e-9 * plane[j].abs().max(1.0));
        }
    }

    #[test]
    fn cubic_reproduction_away_from_seam() {
        // f(x) = x^3 on [-2, 2) with 32 samples per unit; the seam sits at the
        // boundary and its influence decays geometrically inward.
        let n = 128;
        let shape = GridShape::square(n).unwrap();
        let coord = |c: f64| (c - 64.0) / 32.0;
        let plane: Vec<f64> = (0..shape.len()).map(|j| coord(shape.position(j).0).powi(3)).collect();
        let s = prefilter(&plane, shape).unwrap();
        for c in 40..88 {
            let x = c as f64 + 0.5;
            let v = interp(&s, x, 17.0);
            assert!((v - coord(x).powi(3)).abs() < 1e-8, "x={x} got {v}");
        }
    }

    #[test]
    fn linear_ramp_midpoints() {
        let shape = GridShape::square(64).unwrap();
        // ramp in y, periodic seam far from the probed rows
        let plane: Vec<f64> = (0..shape.len()).map(|j| 0.25 * shape.position(j).1).collect();
        let s = prefilter(&plane, shape).unwrap();
        for r in 24..40 {
            let y = r as f64 + 0.5;
            assert!((interp(&s, 3.0, y) - 0.25 * y).abs() < 1e-9);
        }
    }

    #[test]
    fn interp_matches_direct_kernel_sum() {
        let shape = GridShape::new(16, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let plane = random_plane(shape.len(), &mut rng);
        let s = prefilter(&plane, shape).unwrap();
        for _ in 0..50 {
            let x: f64 = rng.random_range(-20.0..20.0);
            let y: f64 = rng.random_range(-20.0..20.0);
            let mut direct = 0.0;
            let (ix, iy) = (x.floor() as i64, y.floor() as i64);
            for dy in -1..=2 {
                for dx in -1..=2 {
                    let (cx, cy) = (ix + dx, iy + dy);
                    let idx = shape.index(cy.rem_euclid(16) as usize, cx.rem_euclid(8) as usize);
                    direct += s.coeffs[idx] * beta3(x - cx as f64) * beta3(y - cy as f64);
                }
            }
            assert!((interp(&s, x, y) - direct).abs() < 1e-12);
        }
    }

    fn random_layer(shape: GridShape, seed: u64, d_scale: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let m = shape.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_plane(CHANNELS * m, &mut rng);
        let d: Vec<f64> = random_plane(2 * m, &mut rng).iter().map(|v| v * d_scale).collect();
        let w0 = random_plane(m, &mut rng);
        let w1 = random_plane(m, &mut rng);
        (x, d, w0, w1)
    }

    #[test]
    fn identity_warp() {
        let shape = GridShape::square(16).unwrap();
        let (x, _, _, _) = random_layer(shape, 3, 0.0);
        let m = shape.len();
        let z = vec![0.0; m];
        let out = warp_layer(shape, &x, &vec![0.0; 2 * m], &z, &z, [1.0; 3], [2.0; 3], 1.0).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pure_vertical_offset() {
        let shape = GridShape::square(8).unwrap();
        let m = shape.len();
        let (x, _, _, _) = random_layer(shape, 4, 0.0);
        let out = warp_layer(shape, &x, &vec![0.0; 2 * m], &vec![1.0; m], &vec![0.0; m], [2.0, 0.0, 0.0], [0.0; 3], 1.0)
            .unwrap();
        for j in 0..m {
            assert!((out[j] - (x[j] - 1.0)).abs() < 1e-9);
            assert!((out[m + j] - x[m + j]).abs() < 1e-9);
            assert!((out[2 * m + j] - x[2 * m + j]).abs() < 1e-9);
        }
    }

    #[test]
    fn integer_shift_is_circular_shift() {
        let shape = GridShape::new(8, 16).unwrap();
        let m = shape.len();
        let (x, _, _, _) = random_layer(shape, 5, 0.0);
        let mut d = vec![0.0; 2 * m];
        d[..m].iter_mut().for_each(|v| *v = 1.0);
        let z = vec![0.0; m];
        let out = warp_layer(shape, &x, &d, &z, &z, [0.0; 3], [0.0; 3], 1.0).unwrap();
        for l in 0..CHANNELS {
            for r in 0..shape.rows {
                for c in 0..shape.cols {
                    let shifted = x[l * m + shape.index(r, (c + 1) % shape.cols)];
                    assert!((out[l * m + shape.index(r, c)] - shifted).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn full_period_shift_is_identity() {
        let shape = GridShape::new(8, 16).unwrap();
        let m = shape.len();
        let (x, _, _, _) = random_layer(shape, 6, 0.0);
        let mut d = vec![0.0; 2 * m];
        d[..m].iter_mut().for_each(|v| *v = shape.cols as f64);
        let z = vec![0.0; m];
        let out = warp_layer(shape, &x, &d, &z, &z, [0.0; 3], [0.0; 3], 1.0).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn warp_is_linear_in_image() {
        let shape = GridShape::square(16).unwrap();
        let m = shape.len();
        let (x, d, _, _) = random_layer(shape, 7, 2.0);
        let (x2, _, _, _) = random_layer(shape, 8, 0.0);
        let z = vec![0.0; m];
        let engine = SplineEngine::new(shape);
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = x.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();
        let lhs = engine.warp_layer(&mix, &d, &z, &z, [0.0; 3], [0.0; 3], 1.0).unwrap();
        let w1 = engine.warp_layer(&x, &d, &z, &z, [0.0; 3], [0.0; 3], 1.0).unwrap();
        let w2 = engine.warp_layer(&x2, &d, &z, &z, [0.0; 3], [0.0; 3], 1.0).unwrap();
        for i in 0..lhs.len() {
            assert!((lhs[i] - (a * w1[i] + b * w2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn jvp_closed_forms() {
        let shape = GridShape::square(8).unwrap();
        let m = shape.len();
        let engine = SplineEngine::new(shape);
        let (x, d, w0, w1) = random_layer(shape, 9, 1.5);
        let (tx, _, _, _) = random_layer(shape, 10, 0.0);
        let z = vec![0.0; m];
        let z2 = vec![0.0; 2 * m];
        let gk = [0.5, -1.0, 2.0];
        let gk1 = [1.5, 0.25, -0.75];
        // image direction: linear argument
        let jx = engine.warp_jvp(&x, &d, &w0, &w1, (&tx, &z2, &z, &z), gk, gk1, 1.0).unwrap();
        let wx = engine.warp_layer(&tx, &d, &z, &z, gk, gk1, 1.0).unwrap();
        for (a, b) in jx.iter().zip(&wx) {
            assert!((a - b).abs() < 1e-12);
        }
        // vertical wind direction e_j
        let j = 13;
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        let zx = vec![0.0; CHANNELS * m];
        let jw = engine.warp_jvp(&x, &d, &w0, &w1, (&zx, &z2, &e, &z), gk, gk1, 1.0).unwrap();
        for l in 0..CHANNELS {
            for i in 0..m {
                let expect = if i == j { -0.5 * gk[l] } else { 0.0 };
                assert!((jw[l * m + i] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn jvp_matches_finite_differences_in_displacement() {
        let shape = GridShape::square(16).unwrap();
        let m = shape.len();
        let engine = SplineEngine::new(shape);
        let gk = [0.5, -1.0, 2.0];
        let gk1 = [1.5, 0.25, -0.75];
        for seed in 0..5 {
            let (x, d, w0, w1) = random_layer(shape, 20 + seed, 2.0);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let td = random_plane(2 * m, &mut rng);
            let zx = vec![0.0; CHANNELS * m];
            let z = vec![0.0; m];
            let jvp = engine.warp_jvp(&x, &d, &w0, &w1, (&zx, &td, &z, &z), gk, gk1, 1.0).unwrap();
            let h = 1e-4;
            let plus: Vec<f64> = d.iter().zip(&td).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = d.iter().zip(&td).map(|(a, b)| a - h * b).collect();
            let fp = engine.warp_layer(&x, &plus, &w0, &w1, gk, gk1, 1.0).unwrap();
            let fm = engine.warp_layer(&x, &minus, &w0, &w1, gk, gk1, 1.0).unwrap();
            let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let num: f64 = jvp.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num / den < 1e-5, "relative error {}", num / den);
        }
    }

    #[test]
    fn scatter_is_adjoint_of_sampling() {
        let shape = GridShape::new(8, 16).unwrap();
        let m = shape.len();
        let engine = SplineEngine::new(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let coeffs = random_plane(CHANNELS * m, &mut rng);
        let r = random_plane(CHANNELS * m, &mut rng);
        let d: Vec<f64> = random_plane(2 * m, &mut rng).iter().map(|v| 3.0 * v).collect();
        let mut sampled = vec![0.0; CHANNELS * m];
        engine.sample_layer(&coeffs, &d, &mut sampled, None);
        let mut back = vec![0.0; CHANNELS * m];
        engine.scatter_layer(&r, &d, &mut back);
        let lhs: f64 = sampled.iter().zip(&r).map(|(a, b)| a * b).sum();
        let rhs: f64 = coeffs.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let shape = GridShape::square(8).unwrap();
        let m = shape.len();
        let err = warp_layer(shape, &vec![0.0; m], &vec![0.0; 2 * m], &vec![0.0; m], &vec![0.0; m], [0.0; 3], [0.0; 3], 1.0);
        assert!(matches!(err, Err(AmvError::ShapeMismatch(_))));
    }
}
