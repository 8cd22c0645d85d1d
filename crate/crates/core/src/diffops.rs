//! Matrix-free periodic finite-difference operators and the hydrostatic
//! constraint `h(d, w) = D d - L w`.
//!
//! Layout conventions: a displacement layer is `[dx (m) | dy (m)]`; a stack of
//! layers is the concatenation over `k`. Interior vertical winds are the
//! `(K-1) x m` block of levels `1..K`.

use crate::error::{AmvError, Result};
use crate::grid::{AmvState, GridShape, PressureGrid};

/// Which linear operator a [`LinearFieldOperator`] implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Divergence,
    Laplacian,
    HydroD,
    HydroL,
}

/// A linear map over flat field vectors together with its adjoint.
pub trait LinearFieldOperator {
    fn kind(&self) -> OperatorKind;
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, input: &[f64], out: &mut [f64]);
    fn adjoint(&self, input: &[f64], out: &mut [f64]);
}

fn check_len(got: usize, expected: usize, what: &str) -> Result<()> {
    if got != expected {
        return Err(AmvError::ShapeMismatch(format!("{what}: expected {expected} entries, got {got}")));
    }
    Ok(())
}

/// Centered periodic divergence of `[dx | dy]`, accumulated as `out += scale * div`.
pub fn divergence_acc(shape: GridShape, d: &[f64], scale: f64, out: &mut [f64]) {
    let (rows, cols) = (shape.rows, shape.cols);
    let m = shape.len();
    let (dx, dy) = d.split_at(m);
    let s = 0.5 * scale;
    for r in 0..rows {
        let up = if r == 0 { rows - 1 } else { r - 1 };
        let down = if r + 1 == rows { 0 } else { r + 1 };
        for c in 0..cols {
            let left = if c == 0 { cols - 1 } else { c - 1 };
            let right = if c + 1 == cols { 0 } else { c + 1 };
            out[r * cols + c] += s
                * (dx[r * cols + right] - dx[r * cols + left] + dy[down * cols + c] - dy[up * cols + c]);
        }
    }
}

/// Adjoint of the divergence (a negative centered gradient), accumulated as
/// `out += scale * div^T v`.
pub fn divergence_adjoint_acc(shape: GridShape, v: &[f64], scale: f64, out: &mut [f64]) {
    let (rows, cols) = (shape.rows, shape.cols);
    let m = shape.len();
    let (gx, gy) = out.split_at_mut(m);
    let s = 0.5 * scale;
    for r in 0..rows {
        let up = if r == 0 { rows - 1 } else { r - 1 };
        let down = if r + 1 == rows { 0 } else { r + 1 };
        for c in 0..cols {
            let left = if c == 0 { cols - 1 } else { c - 1 };
            let right = if c + 1 == cols { 0 } else { c + 1 };
            gx[r * cols + c] += s * (v[r * cols + left] - v[r * cols + right]);
            gy[r * cols + c] += s * (v[up * cols + c] - v[down * cols + c]);
        }
    }
}

pub fn divergence(dk: &[f64], shape: GridShape) -> Result<Vec<f64>> {
    check_len(dk.len(), 2 * shape.len(), "divergence")?;
    let mut out = vec![0.0; shape.len()];
    divergence_acc(shape, dk, 1.0, &mut out);
    Ok(out)
}

pub fn divergence_adjoint(v: &[f64], shape: GridShape) -> Result<Vec<f64>> {
    check_len(v.len(), shape.len(), "divergence adjoint")?;
    let mut out = vec![0.0; 2 * shape.len()];
    divergence_adjoint_acc(shape, v, 1.0, &mut out);
    Ok(out)
}

/// Five-point periodic Laplacian, `out += scale * lap(u)`.
pub fn laplacian_acc(shape: GridShape, u: &[f64], scale: f64, out: &mut [f64]) {
    let (rows, cols) = (shape.rows, shape.cols);
    for r in 0..rows {
        let up = if r == 0 { rows - 1 } else { r - 1 };
        let down = if r + 1 == rows { 0 } else { r + 1 };
        for c in 0..cols {
            let left = if c == 0 { cols - 1 } else { c - 1 };
            let right = if c + 1 == cols { 0 } else { c + 1 };
            let j = r * cols + c;
            out[j] += scale
                * (u[r * cols + left] + u[r * cols + right] + u[up * cols + c] + u[down * cols + c] - 4.0 * u[j]);
        }
    }
}

pub fn laplacian(u: &[f64], shape: GridShape) -> Result<Vec<f64>> {
    check_len(u.len(), shape.len(), "laplacian")?;
    let mut out = vec![0.0; shape.len()];
    laplacian_acc(shape, u, 1.0, &mut out);
    Ok(out)
}

/// `D d`: block `k` is `dp^k div(d^k)`.
pub fn apply_d(d: &[f64], grid: &PressureGrid, shape: GridShape) -> Result<Vec<f64>> {
    let (k, m) = (grid.layers(), shape.len());
    check_len(d.len(), 2 * k * m, "apply_D")?;
    let mut out = vec![0.0; k * m];
    for (layer, dp) in grid.increments().iter().enumerate() {
        divergence_acc(shape, &d[2 * layer * m..2 * (layer + 1) * m], *dp, &mut out[layer * m..(layer + 1) * m]);
    }
    Ok(out)
}

pub fn apply_d_adjoint(v: &[f64], grid: &PressureGrid, shape: GridShape) -> Result<Vec<f64>> {
    let (k, m) = (grid.layers(), shape.len());
    check_len(v.len(), k * m, "apply_D adjoint")?;
    let mut out = vec![0.0; 2 * k * m];
    for (layer, dp) in grid.increments().iter().enumerate() {
        divergence_adjoint_acc(shape, &v[layer * m..(layer + 1) * m], *dp, &mut out[2 * layer * m..2 * (layer + 1) * m]);
    }
    Ok(out)
}

/// `L w`: block `k` is `w^k - w^{k+1}` with `w^0 = w^K = 0`.
pub fn apply_l(w_interior: &[f64], layers: usize, m: usize) -> Result<Vec<f64>> {
    check_len(w_interior.len(), (layers - 1) * m, "apply_L")?;
    let mut out = vec![0.0; layers * m];
    for k in 0..layers {
        let blk = &mut out[k * m..(k + 1) * m];
        if k >= 1 {
            let w = &w_interior[(k - 1) * m..k * m];
            blk.iter_mut().zip(w).for_each(|(o, v)| *o += v);
        }
        if k + 1 < layers {
            let w = &w_interior[k * m..(k + 1) * m];
            blk.iter_mut().zip(w).for_each(|(o, v)| *o -= v);
        }
    }
    Ok(out)
}

/// `L^T v`: interior level `i` receives `v_i - v_{i-1}`.
pub fn apply_l_adjoint(v: &[f64], layers: usize, m: usize) -> Result<Vec<f64>> {
    check_len(v.len(), layers * m, "apply_L adjoint")?;
    let mut out = vec![0.0; (layers - 1) * m];
    for i in 1..layers {
        let o = &mut out[(i - 1) * m..i * m];
        for j in 0..m {
            o[j] = v[i * m + j] - v[(i - 1) * m + j];
        }
    }
    Ok(out)
}

/// `D d - L w` for a full state.
pub fn hydrostatic_residual(state: &AmvState, grid: &PressureGrid) -> Result<Vec<f64>> {
    if state.layers != grid.layers() {
        return Err(AmvError::ShapeMismatch(format!(
            "state has {} layers, pressure grid {}",
            state.layers,
            grid.layers()
        )));
    }
    let m = state.shape.len();
    let mut h = apply_d(&state.d, grid, state.shape)?;
    let lw = apply_l(state.omega_interior(), state.layers, m)?;
    h.iter_mut().zip(&lw).for_each(|(a, b)| *a -= b);
    Ok(h)
}

/// `||D d - L w|| / max(||D d||, ||L w||)`, zero when both vanish.
pub fn relative_hydrostatic_residual(state: &AmvState, grid: &PressureGrid) -> Result<f64> {
    let m = state.shape.len();
    let dd = apply_d(&state.d, grid, state.shape)?;
    let lw = apply_l(state.omega_interior(), state.layers, m)?;
    let num = dd.iter().zip(&lw).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den = norm(&dd).max(norm(&lw));
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Vertically integrated mass flux `sum_k dp^k div d^k`; nonzero entries mark
/// pixels where no vertical wind profile satisfies the constraint exactly.
pub fn vertical_imbalance(d: &[f64], grid: &PressureGrid, shape: GridShape) -> Result<Vec<f64>> {
    let m = shape.len();
    let dd = apply_d(d, grid, shape)?;
    let mut out = vec![0.0; m];
    for blk in dd.chunks(m) {
        out.iter_mut().zip(blk).for_each(|(o, v)| *o += v);
    }
    Ok(out)
}

/// Per-pixel least-squares solve of `L w = r` for the `K - 1` interior winds.
/// The normal matrix `L^T L` is the tridiagonal `[-1, 2, -1]`, factored once.
pub fn solve_vertical_from_flux(r: &[f64], layers: usize, m: usize) -> Result<Vec<f64>> {
    check_len(r.len(), layers * m, "solve_vertical")?;
    let n = layers - 1;
    // Thomas factorisation of tridiag(-1, 2, -1).
    let mut cprime = vec![0.0; n];
    let mut denom = vec![0.0; n];
    for i in 0..n {
        let prev = if i == 0 { 0.0 } else { cprime[i - 1] };
        denom[i] = 2.0 + prev;
        cprime[i] = -1.0 / denom[i];
    }
    let mut w = vec![0.0; n * m];
    let mut rhs = vec![0.0; n];
    for j in 0..m {
        for i in 0..n {
            let ltr = r[(i + 1) * m + j] - r[i * m + j];
            let prev = if i == 0 { 0.0 } else { rhs[i - 1] };
            rhs[i] = (ltr + prev) / denom[i];
        }
        let mut next = 0.0;
        for i in (0..n).rev() {
            let v = rhs[i] - cprime[i] * next;
            w[i * m + j] = v;
            next = v;
        }
    }
    Ok(w)
}

/// Minimum-norm least-squares vertical winds `L^+ D d`.
pub fn solve_vertical(d: &[f64], grid: &PressureGrid, shape: GridShape) -> Result<Vec<f64>> {
    let r = apply_d(d, grid, shape)?;
    solve_vertical_from_flux(&r, grid.layers(), shape.len())
}

/// Divergence as a [`LinearFieldOperator`] (`2m -> m`).
pub struct DivergenceOp(pub GridShape);

impl LinearFieldOperator for DivergenceOp {
    fn kind(&self) -> OperatorKind {
        OperatorKind::Divergence
    }
    fn input_len(&self) -> usize {
        2 * self.0.len()
    }
    fn output_len(&self) -> usize {
        self.0.len()
    }
    fn apply(&self, input: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        divergence_acc(self.0, input, 1.0, out);
    }
    fn adjoint(&self, input: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        divergence_adjoint_acc(self.0, input, 1.0, out);
    }
}

/// Five-point Laplacian (`m -> m`, self-adjoint).
pub struct LaplacianOp(pub GridShape);

impl LinearFieldOperator for LaplacianOp {
    fn kind(&self) -> OperatorKind {
        OperatorKind::Laplacian
    }
    fn input_len(&self) -> usize {
        self.0.len()
    }
    fn output_len(&self) -> usize {
        self.0.len()
    }
    fn apply(&self, input: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        laplacian_acc(self.0, input, 1.0, out);
    }
    fn adjoint(&self, input: &[f64], out: &mut [f64]) {
        self.apply(input, out);
    }
}

/// `D` (`2Km -> Km`).
pub struct HydroDOp {
    pub grid: PressureGrid,
    pub shape: GridShape,
}

impl LinearFieldOperator for HydroDOp {
    fn kind(&self) -> OperatorKind {
        OperatorKind::HydroD
    }
    fn input_len(&self) -> usize {
        2 * self.grid.layers() * self.shape.len()
    }
    fn output_len(&self) -> usize {
        self.grid.layers() * self.shape.len()
    }
    fn apply(&self, input: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&apply_d(input, &self.grid, self.shape).expect("length checked by caller"));
    }
    fn adjoint(&self, input: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&apply_d_adjoint(input, &self.grid, self.shape).expect("length checked by caller"));
    }
}

/// `L` (`(K-1)m -> Km`).
pub struct HydroLOp {
    pub layers: usize,
    pub m: usize,
}

impl LinearFieldOperator for HydroLOp {
    fn kind(&self) -> OperatorKind {
        OperatorKind::HydroL
    }
    fn input_len(&self) -> usize {
        (self.layers - 1) * self.m
    }
    fn output_len(&self) -> usize {
        self.layers * self.m
    }
    fn apply(&self, input: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&apply_l(input, self.layers, self.m).expect("length checked by caller"));
    }
    fn adjoint(&self, input: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&apply_l_adjoint(input, self.layers, self.m).expect("length checked by caller"));
    }
}

/// Relative adjoint mismatch `|<Au, v> - <u, A^T v>| / max(|<Au, v>|, |<u, A^T v>|)`.
pub fn adjoint_mismatch(op: &dyn LinearFieldOperator, u: &[f64], v: &[f64]) -> f64 {
    let mut au = vec![0.0; op.output_len()];
    let mut atv = vec![0.0; op.input_len()];
    op.apply(u, &mut au);
    op.adjoint(v, &mut atv);
    let lhs: f64 = au.iter().zip(v).map(|(a, b)| a * b).sum();
    let rhs: f64 = u.iter().zip(&atv).map(|(a, b)| a * b).sum();
    let scale = lhs.abs().max(rhs.abs());
    if scale == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn grid(levels: &[f64]) -> PressureGrid {
        PressureGrid::new(levels).unwrap()
    }

    #[test]
    fn divergence_of_constant_field_vanishes() {
        let shape = GridShape::square(8).unwrap();
        let mut d = vec![0.3; 16 * 8];
        d[64..].iter_mut().for_each(|v| *v = -1.7);
        assert!(divergence(&d, shape).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn divergence_of_sine_mode() {
        let shape = GridShape::new(16, 64).unwrap();
        let m = shape.len();
        let k = 2.0 * PI / 64.0;
        let mut d = vec![0.0; 2 * m];
        for j in 0..m {
            d[j] = (k * shape.position(j).0).sin();
        }
        let div = divergence(&d, shape).unwrap();
        for j in 0..m {
            let exact = k * (k * shape.position(j).0).cos();
            assert!((div[j] - exact).abs() < 10.0 * k.powi(3));
        }
    }

    #[test]
    fn solenoidal_field_from_stream_function() {
        // rotation around the centre, periodised through a smooth stream function
        let shape = GridShape::square(32).unwrap();
        let m = shape.len();
        let psi: Vec<f64> = (0..m)
            .map(|j| {
                let (x, y) = shape.position(j);
                let (a, b) = (2.0 * PI * x / 32.0, 2.0 * PI * y / 32.0);
                -(a.cos() + b.cos())
            })
            .collect();
        // d = (-dpsi/dy, dpsi/dx) with centered differences
        let grad = divergence_adjoint(&psi, shape).unwrap(); // = -grad psi
        let mut d = vec![0.0; 2 * m];
        for j in 0..m {
            d[j] = grad[m + j];
            d[m + j] = -grad[j];
        }
        assert!(divergence(&d, shape).unwrap().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn laplacian_stencil() {
        let shape = GridShape::square(8).unwrap();
        assert!(laplacian(&vec![2.5; 64], shape).unwrap().iter().all(|v| v.abs() < 1e-15));
        let mut u = vec![0.0; 64];
        let j0 = shape.index(3, 4);
        u[j0] = 1.0;
        let lap = laplacian(&u, shape).unwrap();
        let nbrs = [shape.index(2, 4), shape.index(4, 4), shape.index(3, 3), shape.index(3, 5)];
        for (j, v) in lap.iter().enumerate() {
            let expect = if j == j0 {
                -4.0
            } else if nbrs.contains(&j) {
                1.0
            } else {
                0.0
            };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn operator_adjoints() {
        let shape = GridShape::square(16).unwrap();
        let m = shape.len();
        let g = grid(&[1000., 950., 900., 850., 800.]);
        let ops: Vec<Box<dyn LinearFieldOperator>> = vec![
            Box::new(DivergenceOp(shape)),
            Box::new(LaplacianOp(shape)),
            Box::new(HydroDOp { grid: g.clone(), shape }),
            Box::new(HydroLOp { layers: 4, m }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for op in &ops {
            for _ in 0..20 {
                let u = rand_vec(op.input_len(), &mut rng);
                let v = rand_vec(op.output_len(), &mut rng);
                assert!(adjoint_mismatch(op.as_ref(), &u, &v) < 1e-10, "{:?}", op.kind());
            }
        }
    }

    #[test]
    fn l_operator_telescopes() {
        let m = 4;
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![-1.0, 0.5, 0.0, 7.0];
        let w: Vec<f64> = a.iter().chain(&b).copied().collect();
        let lw = apply_l(&w, 3, m).unwrap();
        for j in 0..m {
            assert_eq!(lw[j], -a[j]);
            assert_eq!(lw[m + j], a[j] - b[j]);
            assert_eq!(lw[2 * m + j], b[j]);
        }
        assert!(apply_l(&vec![0.0; 2 * m], 3, m).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn apply_d_is_layerwise_scaled_divergence() {
        let shape = GridShape::square(8).unwrap();
        let m = shape.len();
        let g = grid(&[1000., 900., 850., 600.]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = rand_vec(2 * 3 * m, &mut rng);
        let dd = apply_d(&d, &g, shape).unwrap();
        for k in 0..3 {
            let div = divergence(&d[2 * k * m..2 * (k + 1) * m], shape).unwrap();
            for j in 0..m {
                assert!((dd[k * m + j] - g.increments()[k] * div[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_state_has_zero_residual() {
        let shape = GridShape::square(8).unwrap();
        let g = grid(&[1000., 950., 900.]);
        let s = AmvState::zeros(shape, 2);
        assert!(hydrostatic_residual(&s, &g).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_layer_hand_solution() {
        // dp^0 div d^0 = f, dp^1 div d^1 = -f  =>  w^1 = -f zeroes the residual
        let shape = GridShape::new(4, 16).unwrap();
        let m = shape.len();
        let g = grid(&[1000., 900., 850.]);
        let k = 2.0 * PI / 16.0;
        let mut s = AmvState::zeros(shape, 2);
        for j in 0..m {
            let x = shape.position(j).0;
            s.d[j] = (k * x).sin() / 100.0;
            s.d[2 * m + j] = -(k * x).sin() / 50.0;
        }
        let f: Vec<f64> = divergence(&s.d[..2 * m], shape).unwrap().iter().map(|v| 100.0 * v).collect();
        for j in 0..m {
            s.omega[m + j] = -f[j];
        }
        let h = hydrostatic_residual(&s, &g).unwrap();
        assert!(h.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn two_layer_least_squares() {
        let r = vec![3.0, -1.0];
        let w = solve_vertical_from_flux(&r, 2, 1).unwrap();
        assert!((w[0] - (-1.0 - 3.0) / 2.0).abs() < 1e-15);
        let shape = GridShape::square(4).unwrap();
        let g = grid(&[1000., 950., 900.]);
        assert!(solve_vertical(&vec![0.0; 64], &g, shape).unwrap().iter().all(|v| *v == 0.0));
    }

    /// Dense Moore-Penrose solve via the normal equations with Gaussian
    /// elimination on the explicitly materialised K x (K-1) matrix.
    fn dense_lsq(r: &[f64]) -> Vec<f64> {
        let k = r.len();
        let n = k - 1;
        let mut l = vec![vec![0.0; n]; k];
        for row in 0..k {
            if row >= 1 {
                l[row][row - 1] = 1.0;
            }
            if row < n {
                l[row][row] = -1.0;
            }
        }
        let mut a = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = (0..k).map(|row| l[row][i] * l[row][j]).sum();
            }
            a[i][n] = (0..k).map(|row| l[row][i] * r[row]).sum();
        }
        for col in 0..n {
            let piv = (col..n).max_by(|x, y| a[*x][col].abs().total_cmp(&a[*y][col].abs())).unwrap();
            a.swap(col, piv);
            for row in 0..n {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for c in col..=n {
                        a[row][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n] / a[i][i]).collect()
    }

    #[test]
    fn vertical_solve_matches_dense_oracle() {
        let shape = GridShape::square(4).unwrap();
        let m = shape.len();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for k in 2..=6 {
            let levels: Vec<f64> = (0..=k).map(|i| 1000.0 - 60.0 * i as f64 - (i * i) as f64).collect();
            let g = grid(&levels);
            let d = rand_vec(2 * k * m, &mut rng);
            let w = solve_vertical(&d, &g, shape).unwrap();
            let r = apply_d(&d, &g, shape).unwrap();
            for j in 0..m {
                let col: Vec<f64> = (0..k).map(|b| r[b * m + j]).collect();
                let oracle = dense_lsq(&col);
                for i in 0..k - 1 {
                    let got = w[i * m + j];
                    assert!((got - oracle[i]).abs() <= 1e-9 * oracle[i].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn vertical_solve_is_exact_on_balanced_flux() {
        let shape = GridShape::square(8).unwrap();
        let m = shape.len();
        let g = grid(&[1000., 950., 900., 850., 800.]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut r = rand_vec(4 * m, &mut rng);
        for j in 0..m {
            let s: f64 = (0..3).map(|b| r[b * m + j]).sum();
            r[3 * m + j] = -s;
        }
        let w = solve_vertical_from_flux(&r, 4, m).unwrap();
        let lw = apply_l(&w, 4, m).unwrap();
        let res: f64 = r.iter().zip(&lw).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(res / norm(&r) < 1e-12);
        let _ = g;
    }

    #[test]
    fn l_has_full_column_rank() {
        // L^T L = tridiag(-1, 2, -1) is nonsingular: its Thomas pivots stay positive.
        for k in 2..=8 {
            let n = k - 1;
            let mut piv = 2.0;
            for _ in 1..n {
                piv = 2.0 - 1.0 / piv;
                assert!(piv > 0.0);
            }
            // rank check through the solver: unit columns are recovered exactly
            for i in 0..n {
                let mut w = vec![0.0; n];
                w[i] = 1.0;
                let lw = apply_l(&w, k, 1).unwrap();
                let back = solve_vertical_from_flux(&lw, k, 1).unwrap();
                for (a, b) in back.iter().zip(&w) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let shape = GridShape::square(4).unwrap();
        assert!(matches!(divergence(&[0.0; 5], shape), Err(AmvError::ShapeMismatch(_))));
        assert!(matches!(laplacian(&[0.0; 5], shape), Err(AmvError::ShapeMismatch(_))));
    }
}
