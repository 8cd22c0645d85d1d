//! Synthetic ground truth that satisfies the layered model exactly, swath
//! masks, pressure averaging of band profiles and calibration of `gamma`.

use crate::diffops::{divergence_adjoint_acc, solve_vertical};
use crate::error::{AmvError, Result};
use crate::grid::{
    synthesize_observations, AmvState, GridShape, ImageStack, ObservationSet, PhysicsConstants, PressureGrid,
    Timestamp, CHANNELS,
};
use crate::spline::SplineEngine;
use crate::wavelet::{default_depth, WaveletBasis, WaveletFamily};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Observation coverage pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "snake_case")]
pub enum MaskStyle {
    Full,
    /// Diagonal bands covering `coverage` of each `period`-pixel stripe, with
    /// independent offsets at the two times and one pattern for all layers.
    Swath { coverage: f64, period: f64 },
    /// Independent pixels observed with probability `coverage`, shared by all layers.
    Random { coverage: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub levels: Vec<f64>,
    /// Energy spectrum exponent of the displacement field across scales.
    pub spectral_slope: f64,
    /// Energy spectrum exponent of the `t1` images.
    pub image_slope: f64,
    /// RMS displacement in pixels.
    pub amplitude: f64,
    /// RMS of the divergent part relative to the solenoidal part.
    pub divergent_ratio: f64,
    /// Pair layer divergences so the column-integrated mass flux vanishes.
    pub balanced: bool,
    pub mask: MaskStyle,
    pub sigma: f64,
    /// RMS of the vertical-wind term in the images relative to their unit
    /// standard deviation; sets the scale of `gamma`.
    pub vertical_ratio: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            levels: vec![1000.0, 950.0, 900.0, 850.0, 800.0],
            spectral_slope: -5.0 / 3.0,
            image_slope: -5.0 / 3.0,
            amplitude: 1.0,
            divergent_ratio: 0.5,
            balanced: true,
            mask: MaskStyle::Full,
            sigma: 0.0,
            vertical_ratio: 0.25,
            seed: 0,
        }
    }
}

impl MaskStyle {
    /// Swath pattern with 55% coverage and a period of half the grid height.
    pub fn swath_for(rows: usize) -> Self {
        MaskStyle::Swath { coverage: 0.55, period: rows as f64 / 2.0 }
    }
}

impl SyntheticSpec {
    /// `K = 8`, `256 x 256`, swath masks.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            rows: 256,
            cols: 256,
            levels: (0..=8).map(|i| 1000.0 - 50.0 * i as f64).collect(),
            mask: MaskStyle::swath_for(256),
            sigma: 0.05,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AmvError::InvalidSpec(msg));
        if !(self.amplitude >= 0.0) {
            return bad(format!("amplitude must be non-negative, got {}", self.amplitude));
        }
        if !(self.sigma >= 0.0) || !(self.divergent_ratio >= 0.0) || !(self.vertical_ratio >= 0.0) {
            return bad("sigma, divergent_ratio and vertical_ratio must be non-negative".into());
        }
        match self.mask {
            MaskStyle::Swath { coverage, period } => {
                if !(coverage > 0.0 && coverage <= 1.0) || !(period > 0.0) {
                    return bad(format!("swath needs 0 < coverage <= 1 and period > 0, got {coverage}, {period}"));
                }
            }
            MaskStyle::Random { coverage } => {
                if !(coverage > 0.0 && coverage <= 1.0) {
                    return bad(format!("random mask coverage must be in (0, 1], got {coverage}"));
                }
            }
            MaskStyle::Full => {}
        }
        for n in [self.rows, self.cols] {
            if n < 4 || !n.is_power_of_two() {
                return bad(format!("grid dimensions must be powers of two >= 4, got {n}"));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<GridShape> {
        GridShape::new(self.rows, self.cols)
    }
}

/// A generated problem: truth, the noise-free pair and the observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub grid: PressureGrid,
    pub gamma: PhysicsConstants,
    /// Displacements, winds, and the `t1` coefficients in the default Coif5 basis.
    pub truth: AmvState,
    pub x_t0: ImageStack,
    pub x_t1: ImageStack,
    pub obs: ObservationSet,
}

/// Random field whose wavelet coefficient variance at level `j` (1 = finest)
/// grows like `2^{j (1 - slope)}`, the discrete analogue of an energy
/// spectrum `E(k) ~ k^slope`. Returned with zero mean and unit RMS.
fn power_law_field(basis: &WaveletBasis, slope: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let depth = basis.depth();
    let coeffs: Vec<f64> = basis
        .bands()
        .iter()
        .map(|b| {
            let level = if *b == 0 { depth } else { depth - *b as usize + 1 };
            let z: f64 = StandardNormal.sample(rng);
            z * 2f64.powf(0.5 * level as f64 * (1.0 - slope))
        })
        .collect();
    let mut f = basis.inverse(&coeffs).expect("one plane");
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    f.iter_mut().for_each(|v| *v -= mean);
    let rms = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
    if rms > 0.0 {
        f.iter_mut().for_each(|v| *v /= rms);
    }
    f
}

/// Centered gradient `(dx, dy)` of a scalar field.
fn centered_gradient(shape: GridShape, f: &[f64]) -> Vec<f64> {
    // the divergence adjoint is the negative centered gradient
    let mut g = vec![0.0; 2 * shape.len()];
    divergence_adjoint_acc(shape, f, -1.0, &mut g);
    g
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Truth state and the exact image pair.
pub fn generate_truth(spec: &SyntheticSpec) -> Result<(AmvState, ImageStack, ImageStack, PhysicsConstants)> {
    spec.validate()?;
    let shape = spec.shape()?;
    let grid = PressureGrid::new(&spec.levels)?;
    let layers = grid.layers();
    let m = shape.len();
    let basis = WaveletBasis::new(WaveletFamily::Coif5, shape, default_depth(shape))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // stream functions and potentials; d ~ grad of them, so two powers steeper
    let potential_slope = spec.spectral_slope - 2.0;
    let psi: Vec<Vec<f64>> = (0..layers).map(|_| power_law_field(&basis, potential_slope, &mut rng)).collect();
    let mut phi: Vec<Vec<f64>> = (0..layers).map(|_| power_law_field(&basis, potential_slope, &mut rng)).collect();
    if spec.balanced {
        let dp = grid.increments();
        let norm2: f64 = dp.iter().map(|v| v * v).sum();
        for j in 0..m {
            let s: f64 = (0..layers).map(|k| dp[k] * phi[k][j]).sum::<f64>() / norm2;
            for k in 0..layers {
                phi[k][j] -= dp[k] * s;
            }
        }
    }
    let mut sol = vec![0.0; 2 * layers * m];
    let mut div = vec![0.0; 2 * layers * m];
    for k in 0..layers {
        let gp = centered_gradient(shape, &psi[k]);
        for j in 0..m {
            sol[2 * k * m + j] = -gp[m + j];
            sol[(2 * k + 1) * m + j] = gp[j];
        }
        div[2 * k * m..2 * (k + 1) * m].copy_from_slice(&centered_gradient(shape, &phi[k]));
    }
    let (rs, rd) = (rms(&sol), rms(&div));
    let (ws, wd) = (
        if rs > 0.0 { 1.0 / rs } else { 0.0 },
        if rd > 0.0 { spec.divergent_ratio / rd } else { 0.0 },
    );
    let mut d: Vec<f64> = sol.iter().zip(&div).map(|(a, b)| ws * a + wd * b).collect();
    let r = rms(&d);
    let scale = if r > 0.0 { spec.amplitude / r } else { 0.0 };
    d.iter_mut().for_each(|v| *v *= scale);

    let mut truth = AmvState::zeros(shape, layers);
    truth.d = d;
    let w = solve_vertical(&truth.d, &grid, shape)?;
    truth.omega_interior_mut().copy_from_slice(&w);

    let mut x1 = Vec::with_capacity(layers * CHANNELS * m);
    for _ in 0..layers * CHANNELS {
        let f = power_law_field(&basis, spec.image_slope, &mut rng);
        let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
        x1.extend(f.iter().map(|v| v - lo + 1.0));
    }
    truth.c = basis.forward(&x1)?;

    // gamma: random signs and magnitudes in [0.5, 1.5], scaled to the requested vertical term
    let raw: Vec<[f64; CHANNELS]> = (0..=layers)
        .map(|_| {
            let mut g = [0.0; CHANNELS];
            for v in g.iter_mut() {
                let mag: f64 = rng.random_range(0.5..1.5);
                *v = if rng.random_bool(0.5) { mag } else { -mag };
            }
            g
        })
        .collect();
    let mut vterm = Vec::with_capacity(layers * CHANNELS * m);
    for k in 0..layers {
        for l in 0..CHANNELS {
            for j in 0..m {
                vterm.push(0.5 * (raw[k][l] * truth.omega[k * m + j] + raw[k + 1][l] * truth.omega[(k + 1) * m + j]));
            }
        }
    }
    let vr = rms(&vterm);
    let gscale = if vr > 0.0 { spec.vertical_ratio / vr } else { 1.0 };
    let gamma = PhysicsConstants::new(raw.iter().map(|g| g.map(|v| v * gscale)).collect())?;

    let engine = SplineEngine::new(shape);
    let n = CHANNELS * m;
    let mut x0 = Vec::with_capacity(layers * n);
    for k in 0..layers {
        x0.extend(engine.warp_layer(
            &x1[k * n..(k + 1) * n],
            truth.d_layer(k),
            truth.omega_level(k),
            truth.omega_level(k + 1),
            gamma.gamma[k],
            gamma.gamma[k + 1],
            1.0,
        )?);
    }
    let x_t0 = ImageStack::from_values(shape, layers, Timestamp::T0, x0)?;
    let x_t1 = ImageStack::from_values(shape, layers, Timestamp::T1, x1)?;
    Ok((truth, x_t0, x_t1, gamma))
}

/// Masks for `t0` and `t1`, `K x m` each.
pub fn generate_masks(style: MaskStyle, shape: GridShape, layers: usize, seed: u64) -> (Vec<bool>, Vec<bool>) {
    let m = shape.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    let one = |rng: &mut ChaCha8Rng| -> Vec<bool> {
        match style {
            MaskStyle::Full => vec![true; m],
            MaskStyle::Swath { coverage, period } => {
                let offset: f64 = rng.random_range(0.0..period);
                (0..m)
                    .map(|j| {
                        let (x, y) = shape.position(j);
                        ((x + 0.5 * y + offset) / period).rem_euclid(1.0) < coverage
                    })
                    .collect()
            }
            MaskStyle::Random { coverage } => (0..m).map(|_| rng.random_bool(coverage)).collect(),
        }
    };
    let m0 = one(&mut rng);
    let m1 = one(&mut rng);
    (m0.repeat(layers), m1.repeat(layers))
}

/// Full synthetic dataset with masked, noisy observations.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let (truth, x_t0, x_t1, gamma) = generate_truth(spec)?;
    let grid = PressureGrid::new(&spec.levels)?;
    let (mask0, mask1) = generate_masks(spec.mask, truth.shape, truth.layers, spec.seed);
    let obs = synthesize_observations(&x_t0, &x_t1, &mask0, &mask1, spec.sigma, spec.seed.wrapping_add(1))?;
    Ok(SyntheticDataset { spec: spec.clone(), grid, gamma, truth, x_t0, x_t1, obs })
}

/// Layer averages of a piecewise-constant band profile: band `b` holds
/// `bands[b]` between `band_pressures[b]` and `band_pressures[b + 1]`.
pub fn pressure_average(bands: &[f64], band_pressures: &[f64], grid: &PressureGrid, m: usize) -> Result<Vec<f64>> {
    let nb = band_pressures.len().saturating_sub(1);
    if nb == 0 || bands.len() != nb * m {
        return Err(AmvError::ShapeMismatch(format!(
            "{} band values for {nb} bands of {m} pixels",
            bands.len()
        )));
    }
    if band_pressures.windows(2).any(|w| w[1] >= w[0]) {
        return Err(AmvError::InvalidConfig("band pressures must be strictly decreasing".into()));
    }
    let levels = grid.levels();
    let mut out = vec![0.0; grid.layers() * m];
    for (k, dp) in grid.increments().iter().enumerate() {
        let (top, bottom) = (levels[k + 1], levels[k]);
        let mut covered = 0.0;
        for b in 0..nb {
            let overlap = band_pressures[b].min(bottom) - band_pressures[b + 1].max(top);
            if overlap > 0.0 {
                covered += overlap;
                let w = overlap / dp;
                for j in 0..m {
                    out[k * m + j] += w * bands[b * m + j];
                }
            }
        }
        if covered < dp * (1.0 - 1e-9) {
            return Err(AmvError::CoverageGap { layer: k });
        }
    }
    Ok(out)
}

/// Least-squares `gamma` and the boundaries it could not identify.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaFit {
    pub gamma: PhysicsConstants,
    /// Boundaries with `sum w^2 < 1e-12`, whose `gamma` is set to zero.
    pub singular: Vec<usize>,
}

/// Fits `gamma` per channel from the part of `x_t0` that the horizontal warp
/// of `x_t1` does not explain, given the winds `omega` (`(K+1) x m`).
pub fn calibrate_gamma(
    x_t0: &ImageStack,
    x_t1: &ImageStack,
    d: &[f64],
    omega: &[f64],
    grid: &PressureGrid,
) -> Result<GammaFit> {
    let shape = x_t1.shape;
    let layers = grid.layers();
    let m = shape.len();
    if x_t0.shape != shape || x_t0.layers != layers || x_t1.layers != layers {
        return Err(AmvError::ShapeMismatch("image stacks do not match the pressure grid".into()));
    }
    if d.len() != 2 * layers * m || omega.len() != (layers + 1) * m {
        return Err(AmvError::ShapeMismatch("displacement or wind stack has the wrong size".into()));
    }
    let engine = SplineEngine::new(shape);
    let zero = vec![0.0; m];
    // r = horizontal warp - x_t0 = dt/2 (g^k w^k + g^{k+1} w^{k+1})
    let mut rhs = vec![[0.0; CHANNELS]; layers + 1];
    let mut diag = vec![0.0; layers + 1];
    let mut off = vec![0.0; layers];
    for k in 0..layers {
        let warped =
            engine.warp_layer(x_t1.layer(k), &d[2 * k * m..2 * (k + 1) * m], &zero, &zero, [0.0; 3], [0.0; 3], 1.0)?;
        let (wa, wb) = (&omega[k * m..(k + 1) * m], &omega[(k + 1) * m..(k + 2) * m]);
        for j in 0..m {
            diag[k] += 0.25 * wa[j] * wa[j];
            diag[k + 1] += 0.25 * wb[j] * wb[j];
            off[k] += 0.25 * wa[j] * wb[j];
        }
        let x0 = x_t0.layer(k);
        for l in 0..CHANNELS {
            for j in 0..m {
                let r = warped[l * m + j] - x0[l * m + j];
                rhs[k][l] += 0.5 * r * wa[j];
                rhs[k + 1][l] += 0.5 * r * wb[j];
            }
        }
    }
    let mut singular = Vec::new();
    for i in 0..=layers {
        let energy: f64 = omega[i * m..(i + 1) * m].iter().map(|w| w * w).sum();
        if energy < 1e-12 {
            singular.push(i);
        }
    }
    let interior_singular: Vec<usize> = singular.iter().copied().filter(|i| *i != 0 && *i != layers).collect();
    if !interior_singular.is_empty() {
        log::warn!("gamma is unidentifiable at boundaries {interior_singular:?} (vertical winds vanish); set to 0");
    }
    let free: Vec<usize> = (0..=layers).filter(|i| !singular.contains(i)).collect();
    let nf = free.len();
    let mut gamma = vec![[0.0; CHANNELS]; layers + 1];
    if nf > 0 {
        for l in 0..CHANNELS {
            // dense solve of the reduced tridiagonal system
            let mut a = vec![vec![0.0; nf + 1]; nf];
            for (r, &i) in free.iter().enumerate() {
                for (c, &jj) in free.iter().enumerate() {
                    a[r][c] = if i == jj {
                        diag[i]
                    } else if jj == i + 1 {
                        off[i]
                    } else if i == jj + 1 {
                        off[jj]
                    } else {
                        0.0
                    };
                }
                a[r][nf] = rhs[i][l];
            }
            let sol = gauss_solve(a)
                .ok_or_else(|| AmvError::InvalidConfig("gamma normal equations are singular".into()))?;
            for (r, &i) in free.iter().enumerate() {
                gamma[i][l] = sol[r];
            }
        }
    }
    Ok(GammaFit { gamma: PhysicsConstants::new(gamma)?, singular })
}

fn gauss_solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|x, y| a[*x][col].abs().total_cmp(&a[*y][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..=n {
                a[row][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (a[i][n] - s) / a[i][i];
    }
    Some(x)
}
