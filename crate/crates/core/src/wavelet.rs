//! Periodic orthonormal 2D wavelet transform (Mallat layout), the coarse-to-fine
//! band schedule, and the soft-threshold proximal map.

use crate::error::{AmvError, Result};
use crate::grid::{GridShape, CHANNELS};
use serde::{Deserialize, Serialize};

/// Coiflet with 30 taps (order 5), scaling-function low-pass decomposition filter.
const COIF5_LO: [f64; 30] = [
    -9.604010112767894e-08,
    -1.6237995172048338e-07,
    2.0612203985788783e-06,
    3.7007277113394796e-06,
    -2.1270221672515614e-05,
    -4.12198619242655e-05,
    0.00014035632812373243,
    0.0003018579416682448,
    -0.0006375589261258812,
    -0.0016616273039298788,
    0.0024315754425382886,
    0.006761520220620417,
    -0.009159507338676163,
    -0.019758391600965465,
    0.032674799467057355,
    0.041287530472117834,
    -0.10556315130733723,
    -0.06203775157498196,
    0.4379823066591634,
    0.7742936228603274,
    0.42157126673075435,
    -0.052046670253554764,
    -0.09192158806008609,
    0.028169744270532353,
    0.023408322118927783,
    -0.010131584846900276,
    -0.00415931262757864,
    0.0021782943778456947,
    0.0003585777411617577,
    -0.000212081862067494,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    /// 30-tap Coiflet.
    #[default]
    Coif5,
    Haar,
}

impl WaveletFamily {
    fn low_pass(self) -> Vec<f64> {
        match self {
            WaveletFamily::Coif5 => COIF5_LO.to_vec(),
            WaveletFamily::Haar => vec![std::f64::consts::FRAC_1_SQRT_2; 2],
        }
    }
}

/// Separable periodic wavelet basis for one grid shape.
#[derive(Debug, Clone)]
pub struct WaveletBasis {
    family: WaveletFamily,
    shape: GridShape,
    depth: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    bands: Vec<u8>,
}

/// Largest admissible decomposition depth for a shape.
pub fn max_depth(shape: GridShape) -> usize {
    shape.rows.min(shape.cols).trailing_zeros() as usize
}

/// `log2(min(rows, cols)) - 2`, leaving a 4x4 coarse band on square grids.
pub fn default_depth(shape: GridShape) -> usize {
    max_depth(shape).saturating_sub(2).max(1)
}

impl WaveletBasis {
    pub fn new(family: WaveletFamily, shape: GridShape, depth: usize) -> Result<Self> {
        for n in [shape.rows, shape.cols] {
            if !n.is_power_of_two() {
                return Err(AmvError::NonPowerOfTwo(n));
            }
        }
        let max = max_depth(shape);
        if depth > max {
            return Err(AmvError::BadDepth { depth, max });
        }
        let lo = family.low_pass();
        let len = lo.len();
        let hi = (0..len)
            .map(|n| if n % 2 == 0 { lo[len - 1 - n] } else { -lo[len - 1 - n] })
            .collect();
        let bands = band_map(shape, depth);
        Ok(Self { family, shape, depth, lo, hi, bands })
    }

    /// Coif5 at the default depth.
    pub fn coif5(shape: GridShape) -> Result<Self> {
        Self::new(WaveletFamily::Coif5, shape, default_depth(shape))
    }

    pub fn family(&self) -> WaveletFamily {
        self.family
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of scale bands: the approximation plus one per level.
    pub fn band_count(&self) -> usize {
        self.depth + 1
    }

    /// Band index of every coefficient: 0 is the approximation, `b >= 1` is
    /// the detail at level `depth - b + 1` (so larger `b` is finer).
    pub fn bands(&self) -> &[u8] {
        &self.bands
    }

    fn analyze_1d(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        let half = n / 2;
        let mask = n - 1;
        for i in 0..half {
            let (mut a, mut d) = (0.0, 0.0);
            for (t, (h, g)) in self.lo.iter().zip(&self.hi).enumerate() {
                let v = x[(2 * i + t) & mask];
                a += h * v;
                d += g * v;
            }
            out[i] = a;
            out[half + i] = d;
        }
    }

    fn synthesize_1d(&self, c: &[f64], out: &mut [f64]) {
        let n = c.len();
        let half = n / 2;
        let mask = n - 1;
        out.fill(0.0);
        for i in 0..half {
            let (a, d) = (c[i], c[half + i]);
            for (t, (h, g)) in self.lo.iter().zip(&self.hi).enumerate() {
                out[(2 * i + t) & mask] += h * a + g * d;
            }
        }
    }

    /// In-place forward transform of one `rows x cols` plane.
    pub fn forward_in_place(&self, data: &mut [f64]) {
        let cols = self.shape.cols;
        let mut h = self.shape.rows;
        let mut w = cols;
        let mut src = vec![0.0; h.max(w)];
        let mut dst = vec![0.0; h.max(w)];
        for _ in 0..self.depth {
            for r in 0..h {
                let row = &mut data[r * cols..r * cols + w];
                src[..w].copy_from_slice(row);
                self.analyze_1d(&src[..w], &mut dst[..w]);
                row.copy_from_slice(&dst[..w]);
            }
            for c in 0..w {
                for r in 0..h {
                    src[r] = data[r * cols + c];
                }
                self.analyze_1d(&src[..h], &mut dst[..h]);
                for r in 0..h {
                    data[r * cols + c] = dst[r];
                }
            }
            h /= 2;
            w /= 2;
        }
    }

    /// In-place inverse transform of one plane.
    pub fn inverse_in_place(&self, data: &mut [f64]) {
        let cols = self.shape.cols;
        let mut src = vec![0.0; self.shape.rows.max(cols)];
        let mut dst = vec![0.0; self.shape.rows.max(cols)];
        for level in (0..self.depth).rev() {
            let h = self.shape.rows >> level;
            let w = cols >> level;
            for c in 0..w {
                for r in 0..h {
                    src[r] = data[r * cols + c];
                }
                self.synthesize_1d(&src[..h], &mut dst[..h]);
                for r in 0..h {
                    data[r * cols + c] = dst[r];
                }
            }
            for r in 0..h {
                let row = &mut data[r * cols..r * cols + w];
                src[..w].copy_from_slice(row);
                self.synthesize_1d(&src[..w], &mut dst[..w]);
                row.copy_from_slice(&dst[..w]);
            }
        }
    }

    fn check_planes(&self, len: usize) -> Result<()> {
        let m = self.shape.len();
        if len == 0 || len % m != 0 {
            return Err(AmvError::ShapeMismatch(format!("expected a multiple of {m} samples, got {len}")));
        }
        Ok(())
    }

    /// Forward transform of every consecutive plane in `data`.
    pub fn forward(&self, data: &[f64]) -> Result<Vec<f64>> {
        self.check_planes(data.len())?;
        let mut out = data.to_vec();
        out.chunks_mut(self.shape.len()).for_each(|p| self.forward_in_place(p));
        Ok(out)
    }

    /// Inverse transform of every consecutive plane in `coeffs`.
    pub fn inverse(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check_planes(coeffs.len())?;
        let mut out = coeffs.to_vec();
        out.chunks_mut(self.shape.len()).for_each(|p| self.inverse_in_place(p));
        Ok(out)
    }
}

fn band_map(shape: GridShape, depth: usize) -> Vec<u8> {
    let mut out = vec![0u8; shape.len()];
    for r in 0..shape.rows {
        for c in 0..shape.cols {
            // finest level whose detail quadrants contain (r, c)
            let mut band = 0;
            for level in 1..=depth {
                let (h, w) = (shape.rows >> level, shape.cols >> level);
                if r >= h || c >= w {
                    band = depth - level + 1;
                    break;
                }
            }
            out[r * shape.cols + c] = band as u8;
        }
    }
    out
}

/// Forward transform of a single image.
pub fn fwt2(image: &[f64], basis: &WaveletBasis) -> Result<Vec<f64>> {
    if image.len() != basis.shape.len() {
        return Err(AmvError::ShapeMismatch(format!(
            "fwt2 expects {} samples, got {}",
            basis.shape.len(),
            image.len()
        )));
    }
    basis.forward(image)
}

/// Inverse transform of a single coefficient plane.
pub fn iwt2(coeffs: &[f64], basis: &WaveletBasis) -> Result<Vec<f64>> {
    if coeffs.len() != basis.shape.len() {
        return Err(AmvError::ShapeMismatch(format!(
            "iwt2 expects {} coefficients, got {}",
            basis.shape.len(),
            coeffs.len()
        )));
    }
    basis.inverse(coeffs)
}

/// Nested coarse-to-fine activation stages, each given as the number of
/// active bands counted from the approximation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    stages: Vec<usize>,
}

impl ScaleSchedule {
    pub fn new(stages: Vec<usize>) -> Result<Self> {
        if stages.is_empty() {
            return Err(AmvError::BadSchedule("no stages".into()));
        }
        if stages[0] == 0 {
            return Err(AmvError::BadSchedule("a stage must activate at least one band".into()));
        }
        if stages.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AmvError::BadSchedule(format!("stages must strictly grow, got {stages:?}")));
        }
        Ok(Self { stages })
    }

    /// `count` stages spread evenly from the approximation band alone up to all bands.
    pub fn spread(bands: usize, count: usize) -> Result<Self> {
        if bands == 0 || count == 0 {
            return Err(AmvError::BadSchedule("need at least one band and one stage".into()));
        }
        let top = bands - 1;
        let mut stages: Vec<usize> = (0..count)
            .map(|s| {
                if count == 1 {
                    bands
                } else {
                    1 + ((s * top) as f64 / (count - 1) as f64).round() as usize
                }
            })
            .collect();
        stages.dedup();
        Self::new(stages)
    }

    /// Four stages over the bands of `basis`.
    pub fn default_for(basis: &WaveletBasis) -> Self {
        Self::spread(basis.band_count(), 4).expect("band count is positive")
    }

    /// A single stage with every band active.
    pub fn full(basis: &WaveletBasis) -> Self {
        Self { stages: vec![basis.band_count()] }
    }

    pub fn stages(&self) -> &[usize] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Per-coefficient activity of one plane at `stage`.
    pub fn active_mask(&self, basis: &WaveletBasis, stage: usize) -> Result<Vec<bool>> {
        let n = *self
            .stages
            .get(stage)
            .ok_or(AmvError::BadStage { stage, stages: self.stages.len() })?;
        if n > basis.band_count() {
            return Err(AmvError::BadSchedule(format!(
                "stage {stage} activates {n} bands but the basis has {}",
                basis.band_count()
            )));
        }
        Ok(basis.bands().iter().map(|b| (*b as usize) < n).collect())
    }
}

/// Zeroes every coefficient outside the bands active at `stage`. `coeffs`
/// may hold any number of consecutive planes.
pub fn restrict_to_schedule(
    coeffs: &[f64],
    basis: &WaveletBasis,
    schedule: &ScaleSchedule,
    stage: usize,
) -> Result<Vec<f64>> {
    basis.check_planes(coeffs.len())?;
    let mask = schedule.active_mask(basis, stage)?;
    let m = mask.len();
    Ok(coeffs
        .iter()
        .enumerate()
        .map(|(i, v)| if mask[i % m] { *v } else { 0.0 })
        .collect())
}

/// Scalar soft threshold, the proximal map of `lambda |.|`.
pub fn soft_threshold(v: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(AmvError::NegativeLambda(lambda));
    }
    Ok(soft(v, lambda))
}

#[inline]
pub(crate) fn soft(v: f64, lambda: f64) -> f64 {
    if v >= lambda {
        v - lambda
    } else if v <= -lambda {
        v + lambda
    } else {
        0.0
    }
}

/// Elementwise soft threshold of a `K x 3 x m` coefficient stack with
/// per-layer level `alpha_x[k] / rho`.
pub fn prox_step(c_plus_u: &[f64], alpha_x: &[f64], rho: f64) -> Result<Vec<f64>> {
    if !(rho > 0.0) {
        return Err(AmvError::NonPositiveRho(rho));
    }
    let layers = alpha_x.len();
    if layers == 0 || c_plus_u.len() % (layers * CHANNELS) != 0 {
        return Err(AmvError::ShapeMismatch(format!(
            "prox_step: {} coefficients do not split into {layers} layers of 3 channels",
            c_plus_u.len()
        )));
    }
    if let Some(a) = alpha_x.iter().find(|a| **a < 0.0) {
        return Err(AmvError::NegativeLambda(*a));
    }
    let block = c_plus_u.len() / layers;
    let mut out = Vec::with_capacity(c_plus_u.len());
    for (k, chunk) in c_plus_u.chunks(block).enumerate() {
        let lambda = alpha_x[k] / rho;
        out.extend(chunk.iter().map(|v| soft(*v, lambda)));
    }
    Ok(out)
}
