//! Domain types for the layered discretization: pressure levels, the pixel
//! grid, tri-variate image stacks, the motion state and observations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AmvError, Result};

/// Number of physical channels per layer (temperature, humidity, ozone).
pub const CHANNELS: usize = 3;

/// Storage tag for unobserved entries. Consumers must branch on the mask,
/// never on this value.
pub const MASKED: f64 = f64::NAN;

/// Decreasing pressure levels `p^0 > p^1 > ... > p^K` (hPa) and the layer
/// thicknesses `p^k - p^{k+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureGrid {
    levels: Vec<f64>,
    increments: Vec<f64>,
}

impl PressureGrid {
    pub fn new(levels: &[f64]) -> Result<Self> {
        if levels.len() < 3 {
            return Err(AmvError::TooFewLevels { min: 3, got: levels.len() });
        }
        let mut increments = Vec::with_capacity(levels.len() - 1);
        for (index, w) in levels.windows(2).enumerate() {
            if !(w[0] > w[1]) {
                return Err(AmvError::NonMonotoneLevels { index, upper: w[0], lower: w[1] });
            }
            increments.push(w[0] - w[1]);
        }
        Ok(Self { levels: levels.to_vec(), increments })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Number of layers `K`.
    pub fn layers(&self) -> usize {
        self.increments.len()
    }
}

/// Convenience wrapper matching the operation name used by the CLI.
pub fn build_pressure_grid(levels: &[f64]) -> Result<PressureGrid> {
    PressureGrid::new(levels)
}

/// Pixel grid of `rows x cols`, both powers of two. Linear index
/// `j = row * cols + col`; position of `j` is `(x, y) = (col, row)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        for n in [rows, cols] {
            if n == 0 || !n.is_power_of_two() {
                return Err(AmvError::NonPowerOfTwo(n));
            }
        }
        Ok(Self { rows, cols })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid position `(x, y)` of linear index `j`.
    #[inline]
    pub fn position(&self, j: usize) -> (f64, f64) {
        ((j % self.cols) as f64, (j / self.cols) as f64)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

/// Which of the two acquisition times a stack belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Timestamp {
    T0,
    T1,
}

/// `K x 3 x m` pressure-averaged images; entry `(k, l, j)` lives at
/// `(k * 3 + l) * m + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pub shape: GridShape,
    pub layers: usize,
    pub time: Timestamp,
    pub values: Vec<f64>,
}

impl ImageStack {
    pub fn zeros(shape: GridShape, layers: usize, time: Timestamp) -> Self {
        Self { shape, layers, time, values: vec![0.0; layers * CHANNELS * shape.len()] }
    }

    pub fn from_values(shape: GridShape, layers: usize, time: Timestamp, values: Vec<f64>) -> Result<Self> {
        if values.len() != layers * CHANNELS * shape.len() {
            return Err(AmvError::ShapeMismatch(format!(
                "image stack expects {} values, got {}",
                layers * CHANNELS * shape.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AmvError::ShapeMismatch("image stack values must be finite".into()));
        }
        Ok(Self { shape, layers, time, values })
    }

    /// The three channel planes of layer `k`, contiguous.
    pub fn layer(&self, k: usize) -> &[f64] {
        let n = CHANNELS * self.shape.len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn layer_mut(&mut self, k: usize) -> &mut [f64] {
        let n = CHANNELS * self.shape.len();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn plane(&self, k: usize, channel: usize) -> &[f64] {
        let m = self.shape.len();
        let start = (k * CHANNELS + channel) * m;
        &self.values[start..start + m]
    }
}

/// Horizontal displacements `d` (`K x 2 x m`, pixels per frame), vertical
/// winds `omega` (`(K+1) x m`, zero on both boundary levels) and wavelet
/// coefficients `c` of the `t1` image stack (`K x 3 x m`).
#[derive(Debug, Clone, PartialEq)]
pub struct AmvState {
    pub shape: GridShape,
    pub layers: usize,
    pub d: Vec<f64>,
    pub omega: Vec<f64>,
    pub c: Vec<f64>,
}

impl AmvState {
    pub fn zeros(shape: GridShape, layers: usize) -> Self {
        let m = shape.len();
        Self {
            shape,
            layers,
            d: vec![0.0; layers * 2 * m],
            omega: vec![0.0; (layers + 1) * m],
            c: vec![0.0; layers * CHANNELS * m],
        }
    }

    /// Number of entries in the flat parameter vector, `(6K - 1) m`.
    pub fn theta_len(shape: GridShape, layers: usize) -> usize {
        (6 * layers - 1) * shape.len()
    }

    pub fn d_layer(&self, k: usize) -> &[f64] {
        let m = self.shape.len();
        &self.d[k * 2 * m..(k + 1) * 2 * m]
    }

    pub fn omega_level(&self, k: usize) -> &[f64] {
        let m = self.shape.len();
        &self.omega[k * m..(k + 1) * m]
    }

    /// Interior vertical winds, levels `1..K`, as one `(K-1) x m` slice.
    pub fn omega_interior(&self) -> &[f64] {
        let m = self.shape.len();
        &self.omega[m..self.layers * m]
    }

    pub fn omega_interior_mut(&mut self) -> &mut [f64] {
        let m = self.shape.len();
        let k = self.layers;
        &mut self.omega[m..k * m]
    }

    pub fn c_layer(&self, k: usize) -> &[f64] {
        let n = CHANNELS * self.shape.len();
        &self.c[k * n..(k + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.d.iter().chain(&self.omega).chain(&self.c).all(|v| v.is_finite())
    }

    /// Flat `theta = (d, omega_interior, c)`.
    pub fn pack_theta(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(Self::theta_len(self.shape, self.layers));
        theta.extend_from_slice(&self.d);
        theta.extend_from_slice(self.omega_interior());
        theta.extend_from_slice(&self.c);
        theta
    }

    pub fn unpack_theta(theta: &[f64], shape: GridShape, layers: usize) -> Result<Self> {
        let expected = Self::theta_len(shape, layers);
        if theta.len() != expected {
            return Err(AmvError::ShapeMismatch(format!(
                "theta expects {expected} entries, got {}",
                theta.len()
            )));
        }
        let m = shape.len();
        let mut state = Self::zeros(shape, layers);
        let (d, rest) = theta.split_at(2 * layers * m);
        let (w, c) = rest.split_at((layers - 1) * m);
        state.d.copy_from_slice(d);
        state.omega_interior_mut().copy_from_slice(w);
        state.c.copy_from_slice(c);
        Ok(state)
    }
}

/// Per-layer constants `gamma^k` (one value per channel) for the `K + 1`
/// level boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConstants {
    pub gamma: Vec<[f64; CHANNELS]>,
}

impl PhysicsConstants {
    pub fn new(gamma: Vec<[f64; CHANNELS]>) -> Result<Self> {
        if gamma.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AmvError::InvalidConfig("gamma values must be finite".into()));
        }
        Ok(Self { gamma })
    }

    pub fn zeros(layers: usize) -> Self {
        Self { gamma: vec![[0.0; CHANNELS]; layers + 1] }
    }

    pub fn check_layers(&self, layers: usize) -> Result<()> {
        if self.gamma.len() != layers + 1 {
            return Err(AmvError::ShapeMismatch(format!(
                "gamma needs {} boundary entries, got {}",
                layers + 1,
                self.gamma.len()
            )));
        }
        Ok(())
    }
}

/// Per-pixel validity masks for `K` layers, shared by the three channels.
pub type LayerMask = Vec<bool>;

/// Noisy, partially observed stacks at `t0` and `t1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub shape: GridShape,
    pub layers: usize,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub mask0: LayerMask,
    pub mask1: LayerMask,
    pub sigma: f64,
}

impl ObservationSet {
    /// Checks sizes and visible values; masked entries are overwritten with the sentinel.
    pub fn new(
        shape: GridShape,
        layers: usize,
        mut y0: Vec<f64>,
        mut y1: Vec<f64>,
        mask0: LayerMask,
        mask1: LayerMask,
        sigma: f64,
    ) -> Result<Self> {
        let m = shape.len();
        let n = layers * CHANNELS * m;
        if y0.len() != n || y1.len() != n || mask0.len() != layers * m || mask1.len() != layers * m {
            return Err(AmvError::ShapeMismatch(format!(
                "observations for {layers} layers of {m} pixels need {n} values and {} mask entries",
                layers * m
            )));
        }
        for (y, mask) in [(&mut y0, &mask0), (&mut y1, &mask1)] {
            for (idx, v) in y.iter_mut().enumerate() {
                let j = idx % m;
                let k = idx / (CHANNELS * m);
                if mask[k * m + j] {
                    if !v.is_finite() {
                        return Err(AmvError::InvalidConfig(format!("observed value at entry {idx} is not finite")));
                    }
                } else {
                    *v = MASKED;
                }
            }
        }
        Ok(Self { shape, layers, y0, y1, mask0, mask1, sigma })
    }

    pub fn mask(&self, time: Timestamp, k: usize) -> &[bool] {
        let m = self.shape.len();
        let mask = match time {
            Timestamp::T0 => &self.mask0,
            Timestamp::T1 => &self.mask1,
        };
        &mask[k * m..(k + 1) * m]
    }

    pub fn y_layer(&self, time: Timestamp, k: usize) -> &[f64] {
        let n = CHANNELS * self.shape.len();
        let y = match time {
            Timestamp::T0 => &self.y0,
            Timestamp::T1 => &self.y1,
        };
        &y[k * n..(k + 1) * n]
    }

    /// Pixels observed at both times for layer `k`.
    pub fn joint_mask(&self, k: usize) -> Vec<bool> {
        self.mask(Timestamp::T0, k)
            .iter()
            .zip(self.mask(Timestamp::T1, k))
            .map(|(a, b)| *a && *b)
            .collect()
    }

    /// Noise-free observation of `truth_t0`/`truth_t1` on full masks.
    pub fn fully_observed(truth_t0: &ImageStack, truth_t1: &ImageStack) -> Result<Self> {
        let n = truth_t0.layers * truth_t0.shape.len();
        synthesize_observations(truth_t0, truth_t1, &vec![true; n], &vec![true; n], 0.0, 0)
    }
}

/// Adds i.i.d. Gaussian noise to every visible entry and writes the sentinel
/// elsewhere. Noise is drawn for every entry in storage order, so a visible
/// value never depends on the mask pattern or on masked truth.
pub fn synthesize_observations(
    truth_t0: &ImageStack,
    truth_t1: &ImageStack,
    mask0: &[bool],
    mask1: &[bool],
    sigma: f64,
    seed: u64,
) -> Result<ObservationSet> {
    let shape = truth_t0.shape;
    let layers = truth_t0.layers;
    if truth_t1.shape != shape || truth_t1.layers != layers {
        return Err(AmvError::ShapeMismatch("t0 and t1 stacks differ in shape".into()));
    }
    let m = shape.len();
    if mask0.len() != layers * m || mask1.len() != layers * m {
        return Err(AmvError::ShapeMismatch(format!(
            "masks must hold {} entries, got {} and {}",
            layers * m,
            mask0.len(),
            mask1.len()
        )));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(AmvError::InvalidConfig(format!("noise level must be >= 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observe = |truth: &ImageStack, mask: &[bool]| -> Vec<f64> {
        let mut out = Vec::with_capacity(truth.values.len());
        for (idx, &v) in truth.values.iter().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let k = idx / (CHANNELS * m);
            let j = idx % m;
            out.push(if mask[k * m + j] { v + sigma * noise } else { MASKED });
        }
        out
    };
    let y0 = observe(truth_t0, mask0);
    let y1 = observe(truth_t1, mask1);
    Ok(ObservationSet {
        shape,
        layers,
        y0,
        y1,
        mask0: mask0.to_vec(),
        mask1: mask1.to_vec(),
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pressure_grid_from_benchmark_levels() {
        let g = PressureGrid::new(&[1000., 950., 900., 850., 800., 700., 600., 500., 400.]).unwrap();
        assert_eq!(g.layers(), 8);
        assert_eq!(g.increments(), &[50., 50., 50., 50., 100., 100., 100., 100.]);
    }

    #[test]
    fn minimal_pressure_grid() {
        let g = build_pressure_grid(&[1000., 500., 0.5]).unwrap();
        assert_eq!(g.layers(), 2);
        assert_eq!(g.increments(), &[500., 499.5]);
    }

    #[test]
    fn pressure_grid_rejects_repeated_level() {
        let err = PressureGrid::new(&[1000., 950., 950.]).unwrap_err();
        assert!(matches!(err, AmvError::NonMonotoneLevels { index: 1, .. }));
        assert!(matches!(PressureGrid::new(&[1000., 900.]), Err(AmvError::TooFewLevels { .. })));
    }

    #[test]
    fn grid_shape_requires_powers_of_two() {
        assert!(GridShape::new(16, 32).is_ok());
        assert_eq!(GridShape::new(12, 16), Err(AmvError::NonPowerOfTwo(12)));
    }

    #[test]
    fn theta_dimension() {
        assert_eq!(AmvState::theta_len(GridShape::square(256).unwrap(), 8), 3_080_192);
        assert_eq!(AmvState::theta_len(GridShape::new(2, 2).unwrap(), 2), 44);
        let s = AmvState::zeros(GridShape::new(2, 2).unwrap(), 2);
        assert_eq!(s.pack_theta().len(), 44);
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        let shape = GridShape::new(2, 2).unwrap();
        assert!(matches!(AmvState::unpack_theta(&[0.0; 43], shape, 2), Err(AmvError::ShapeMismatch(_))));
    }

    fn stacks(shape: GridShape, layers: usize, seed: u64) -> (ImageStack, ImageStack) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = layers * CHANNELS * shape.len();
        let a: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        (
            ImageStack::from_values(shape, layers, Timestamp::T0, a).unwrap(),
            ImageStack::from_values(shape, layers, Timestamp::T1, b).unwrap(),
        )
    }

    #[test]
    fn zero_noise_full_mask_reproduces_truth() {
        let shape = GridShape::square(8).unwrap();
        let (t0, t1) = stacks(shape, 2, 1);
        let obs = ObservationSet::fully_observed(&t0, &t1).unwrap();
        assert_eq!(obs.y0, t0.values);
        assert_eq!(obs.y1, t1.values);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let shape = GridShape::square(8).unwrap();
        let (t0, t1) = stacks(shape, 2, 2);
        let mask = vec![true; 2 * 64];
        let a = synthesize_observations(&t0, &t1, &mask, &mask, 1.0, 42).unwrap();
        let b = synthesize_observations(&t0, &t1, &mask, &mask, 1.0, 42).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.y0), bits(&b.y0));
        assert_eq!(bits(&a.y1), bits(&b.y1));
    }

    #[test]
    fn noise_statistics() {
        // first channel plane of a 64x64 layer: 4096 visible entries
        let shape = GridShape::square(64).unwrap();
        let t0 = ImageStack::zeros(shape, 1, Timestamp::T0);
        let t1 = ImageStack::zeros(shape, 1, Timestamp::T1);
        let mask = vec![true; 4096];
        let obs = synthesize_observations(&t0, &t1, &mask, &mask, 1.0, 7).unwrap();
        let samples = &obs.y0[..4096];
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 5.0 / n.sqrt(), "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn masked_entries_carry_sentinel_and_ignore_truth() {
        let shape = GridShape::square(4).unwrap();
        let (t0, t1) = stacks(shape, 1, 3);
        let mut mask = vec![true; 16];
        mask[5] = false;
        let a = synthesize_observations(&t0, &t1, &mask, &mask, 0.3, 9).unwrap();
        let mut t0b = t0.clone();
        for l in 0..CHANNELS {
            t0b.values[l * 16 + 5] = 1e6;
        }
        let b = synthesize_observations(&t0b, &t1, &mask, &mask, 0.3, 9).unwrap();
        for l in 0..CHANNELS {
            assert!(a.y0[l * 16 + 5].is_nan());
        }
        for (i, (x, y)) in a.y0.iter().zip(&b.y0).enumerate() {
            if i % 16 != 5 {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn mask_shape_mismatch() {
        let shape = GridShape::square(4).unwrap();
        let (t0, t1) = stacks(shape, 1, 3);
        let err = synthesize_observations(&t0, &t1, &[true; 15], &[true; 16], 0.0, 0).unwrap_err();
        assert!(matches!(err, AmvError::ShapeMismatch(_)));
    }

    proptest! {
        #[test]
        fn theta_round_trip(seed in any::<u64>(), layers in 2usize..5) {
            let shape = GridShape::new(4, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = AmvState::zeros(shape, layers);
            for v in s.d.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            for v in s.omega_interior_mut().iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            for v in s.c.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let back = AmvState::unpack_theta(&s.pack_theta(), shape, layers).unwrap();
            prop_assert_eq!(&back, &s);
            let m = shape.len();
            prop_assert!(back.omega[..m].iter().all(|v| *v == 0.0));
            prop_assert!(back.omega[layers * m..].iter().all(|v| *v == 0.0));
        }
    }
}
