//! Error metrics against ground truth and the multi-variant benchmark.

use crate::admm::{run_variant, AdmmOptions, Variant};
use crate::energy::SolverConfig;
use crate::error::{AmvError, Result};
use crate::grid::{GridShape, ObservationSet};
use crate::synth::SyntheticDataset;
use serde::Serialize;
use std::fmt::Write as _;
use std::time::Instant;

/// Pixels observed at both times, per layer (`K x m`).
pub fn evaluation_masks(obs: &ObservationSet) -> Vec<bool> {
    (0..obs.layers).flat_map(|k| obs.joint_mask(k)).collect()
}

fn check_masks(masks: &[bool], layers: usize, m: usize) -> Result<()> {
    if masks.len() != layers * m {
        return Err(AmvError::ShapeMismatch(format!("{} mask entries for {layers} layers of {m}", masks.len())));
    }
    Ok(())
}

/// Normalized endpoint error per layer:
/// `sum |d* - d| / sum |d*|` over the layer's observed pixels.
pub fn epe(d_hat: &[f64], d_true: &[f64], masks: &[bool], shape: GridShape) -> Result<Vec<f64>> {
    let m = shape.len();
    if d_true.len() % (2 * m) != 0 || d_hat.len() != d_true.len() {
        return Err(AmvError::ShapeMismatch(format!("displacements of {} and {} values", d_hat.len(), d_true.len())));
    }
    let layers = d_true.len() / (2 * m);
    check_masks(masks, layers, m)?;
    (0..layers)
        .map(|k| {
            let (mut num, mut den) = (0.0, 0.0);
            let (bx, by) = (2 * k * m, (2 * k + 1) * m);
            for j in (0..m).filter(|j| masks[k * m + j]) {
                let (tx, ty) = (d_true[bx + j], d_true[by + j]);
                num += (tx - d_hat[bx + j]).hypot(ty - d_hat[by + j]);
                den += tx.hypot(ty);
            }
            if den == 0.0 {
                Err(AmvError::ZeroDenominator { index: k })
            } else {
                Ok(num / den)
            }
        })
        .collect()
}

/// Normalized RMSE per boundary, `NaN` at the bottom and top where the wind
/// is zero by definition. Interior boundary `i` uses the pixels observed in
/// both adjacent layers.
pub fn vrmse(w_hat: &[f64], w_true: &[f64], masks: &[bool], shape: GridShape) -> Result<Vec<f64>> {
    let m = shape.len();
    if w_true.len() % m != 0 || w_true.len() < 2 * m || w_hat.len() != w_true.len() {
        return Err(AmvError::ShapeMismatch(format!("winds of {} and {} values", w_hat.len(), w_true.len())));
    }
    let levels = w_true.len() / m;
    let layers = levels - 1;
    check_masks(masks, layers, m)?;
    let mut out = vec![f64::NAN; levels];
    for (i, slot) in out.iter_mut().enumerate().take(layers).skip(1) {
        let (mut num, mut den) = (0.0, 0.0);
        for j in (0..m).filter(|j| masks[(i - 1) * m + j] && masks[i * m + j]) {
            let t = w_true[i * m + j];
            num += (t - w_hat[i * m + j]).powi(2);
            den += t * t;
        }
        if den == 0.0 {
            return Err(AmvError::ZeroDenominator { index: i });
        }
        *slot = (num / den).sqrt();
    }
    Ok(out)
}

/// Pixelwise `|d* - d|` for one layer, zero on unobserved pixels.
pub fn epe_map(d_hat: &[f64], d_true: &[f64], masks: &[bool], shape: GridShape, k: usize) -> Vec<f64> {
    let m = shape.len();
    let (bx, by) = (2 * k * m, (2 * k + 1) * m);
    (0..m)
        .map(|j| {
            if masks[k * m + j] {
                (d_true[bx + j] - d_hat[bx + j]).hypot(d_true[by + j] - d_hat[by + j])
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub variant: String,
    pub layer: usize,
    pub epe: f64,
    /// Error at the layer's upper boundary (`NaN` for the top layer).
    pub vrmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mean_epe: f64,
    /// Mean over interior boundaries.
    pub mean_vrmse: f64,
    pub runtime: f64,
    pub outer_iterations: usize,
    pub converged: bool,
}

/// Error norms per pixel for one variant and layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorMap {
    pub variant: String,
    pub layer: usize,
    pub epe: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub shape: GridShape,
    pub rows: Vec<EvalRow>,
    pub summaries: Vec<VariantSummary>,
    pub maps: Vec<ErrorMap>,
}

/// Metrics for one estimate against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate<'a> {
    pub variant: &'a str,
    pub d: &'a [f64],
    pub omega: &'a [f64],
    pub runtime: f64,
    pub outer_iterations: usize,
    pub converged: bool,
}

impl EvalReport {
    pub fn new(shape: GridShape) -> Self {
        Self { shape, rows: Vec::new(), summaries: Vec::new(), maps: Vec::new() }
    }

    /// Appends the rows, summary and maps of one estimate.
    pub fn push(&mut self, est: &Estimate, d_true: &[f64], w_true: &[f64], masks: &[bool]) -> Result<()> {
        let e = epe(est.d, d_true, masks, self.shape)?;
        let v = vrmse(est.omega, w_true, masks, self.shape)?;
        let layers = e.len();
        for k in 0..layers {
            self.rows.push(EvalRow { variant: est.variant.to_string(), layer: k, epe: e[k], vrmse: v[k + 1] });
            self.maps.push(ErrorMap {
                variant: est.variant.to_string(),
                layer: k,
                epe: epe_map(est.d, d_true, masks, self.shape, k),
            });
        }
        let interior = &v[1..layers];
        self.summaries.push(VariantSummary {
            variant: est.variant.to_string(),
            mean_epe: e.iter().sum::<f64>() / layers as f64,
            mean_vrmse: if interior.is_empty() { f64::NAN } else { interior.iter().sum::<f64>() / interior.len() as f64 },
            runtime: est.runtime,
            outer_iterations: est.outer_iterations,
            converged: est.converged,
        });
        Ok(())
    }

    pub fn summary(&self, variant: &str) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    /// `variant,layer,epe,vrmse`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,layer,epe,vrmse\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.8e},{:.8e}", r.variant, r.layer, r.epe, r.vrmse);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,mean_epe,mean_vrmse,runtime,outer_iterations,converged\n");
        for r in &self.summaries {
            let _ = writeln!(
                s,
                "{},{:.8e},{:.8e},{:.8e},{},{}",
                r.variant, r.mean_epe, r.mean_vrmse, r.runtime, r.outer_iterations, r.converged
            );
        }
        s
    }

    /// `variant,layer,row,col,epe` for every observed pixel.
    pub fn maps_csv(&self) -> String {
        let mut s = String::from("variant,layer,row,col,epe\n");
        for map in &self.maps {
            for (j, v) in map.epe.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{:.8e}", map.variant, map.layer, j / self.shape.cols, j % self.shape.cols, v);
            }
        }
        s
    }
}

/// Runs every variant on the dataset's observations and scores it against
/// the dataset's truth. Variants run one after another; each uses the
/// thread pool internally.
pub fn run_benchmark(
    dataset: &SyntheticDataset,
    variants: &[Variant],
    cfg: &SolverConfig,
    opts: &AdmmOptions,
) -> Result<EvalReport> {
    let masks = evaluation_masks(&dataset.obs);
    let mut report = EvalReport::new(dataset.truth.shape);
    for &variant in variants {
        let mut o = opts.clone();
        o.variant = variant;
        o.constraint = None;
        let start = Instant::now();
        let out = run_variant(&dataset.obs, &dataset.grid, cfg, &o)?;
        let runtime = start.elapsed().as_secs_f64();
        log::info!(
            "{variant}: {} outer iterations in {runtime:.2}s (converged: {})",
            out.trace.iterations(),
            out.trace.converged
        );
        report.push(
            &Estimate {
                variant: variant.name(),
                d: &out.state.d,
                omega: &out.state.omega,
                runtime,
                outer_iterations: out.trace.iterations(),
                converged: out.trace.converged,
            },
            &dataset.truth.d,
            &dataset.truth.omega,
            &masks,
        )?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, MaskStyle, SyntheticSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn shape() -> GridShape {
        GridShape::square(8).unwrap()
    }

    #[test]
    fn epe_reference_values() {
        let s = shape();
        let t = field(2 * 2 * 64, 1);
        let masks = vec![true; 128];
        assert!(epe(&t, &t, &masks, s).unwrap().iter().all(|v| *v == 0.0));
        let zero = vec![0.0; t.len()];
        assert!(epe(&zero, &t, &masks, s).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let twice: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        assert!(epe(&twice, &t, &masks, s).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn epe_by_hand() {
        // one layer, 2 observed pixels: truth (3,4) and (0,1); estimate (0,0) and (0,2)
        let s = GridShape::new(1, 4).unwrap();
        let m = s.len();
        let mut t = vec![0.0; 2 * m];
        let mut h = vec![0.0; 2 * m];
        t[0] = 3.0;
        t[m] = 4.0;
        t[m + 1] = 1.0;
        h[m + 1] = 2.0;
        let mut masks = vec![false; m];
        masks[0] = true;
        masks[1] = true;
        // (5 + 1) / (5 + 1)
        assert!((epe(&h, &t, &masks, s).unwrap()[0] - 1.0).abs() < 1e-15);
        h[0] = 3.0;
        // (4 + 1) / 6
        assert!((epe(&h, &t, &masks, s).unwrap()[0] - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn vrmse_reference_values() {
        let s = shape();
        let mut t = field(4 * 64, 2);
        t[..64].iter_mut().for_each(|v| *v = 0.0);
        t[192..].iter_mut().for_each(|v| *v = 0.0);
        let masks = vec![true; 3 * 64];
        let v = vrmse(&t, &t, &masks, s).unwrap();
        assert!(v[0].is_nan() && v[3].is_nan());
        assert_eq!(&v[1..3], &[0.0, 0.0]);
        let zero = vec![0.0; t.len()];
        assert!(vrmse(&zero, &t, &masks, s).unwrap()[1..3].iter().all(|v| (v - 1.0).abs() < 1e-12));
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!(vrmse(&neg, &t, &masks, s).unwrap()[1..3].iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn zero_truth() {
        let s = shape();
        let z = vec![0.0; 2 * 64];
        assert!(matches!(epe(&z, &z, &[true; 64], s), Err(AmvError::ZeroDenominator { index: 0 })));
        let w = vec![0.0; 3 * 64];
        assert!(matches!(vrmse(&w, &w, &[true; 128], s), Err(AmvError::ZeroDenominator { index: 1 })));
        assert!(epe(&z, &z, &[true; 63], s).is_err());
    }

    #[test]
    fn truth_as_estimate_gives_zero_profiles() {
        let ds = generate_dataset(&SyntheticSpec { rows: 32, cols: 32, mask: MaskStyle::Swath { coverage: 0.55, period: 12.0 }, ..SyntheticSpec::default() })
            .unwrap();
        let masks = evaluation_masks(&ds.obs);
        let mut report = EvalReport::new(ds.truth.shape);
        for name in ["a", "b"] {
            let est = Estimate {
                variant: name,
                d: &ds.truth.d,
                omega: &ds.truth.omega,
                runtime: 0.0,
                outer_iterations: 0,
                converged: true,
            };
            report.push(&est, &ds.truth.d, &ds.truth.omega, &masks).unwrap();
        }
        assert_eq!(report.rows.len(), 2 * 4);
        assert!(report.rows.iter().all(|r| r.epe == 0.0 && (r.vrmse == 0.0 || r.layer == 3)));
        assert!(report.rows.iter().filter(|r| r.layer == 3).all(|r| r.vrmse.is_nan()));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.starts_with("variant,layer,epe,vrmse\n"));
        assert_eq!(report.maps_csv().lines().count(), 1 + 8 * 1024);
    }

    proptest! {
        #[test]
        fn epe_is_scale_invariant(seed in 0u64..500, c in prop_oneof![-5.0..-0.1f64, 0.1..5.0f64]) {
            let s = shape();
            let t = field(2 * 128, seed);
            let h = field(2 * 128, seed + 1000);
            let masks = vec![true; 128];
            let a = epe(&h, &t, &masks, s).unwrap();
            let ts: Vec<f64> = t.iter().map(|v| c * v).collect();
            let hs: Vec<f64> = h.iter().map(|v| c * v).collect();
            let b = epe(&hs, &ts, &masks, s).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn masked_pixels_never_count(seed in 0u64..500, junk in -1e3..1e3f64) {
            let s = shape();
            let t = field(2 * 128, seed);
            let h = field(2 * 128, seed + 7);
            let wt = field(3 * 64, seed + 3);
            let wh = field(3 * 64, seed + 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let masks: Vec<bool> = (0..128).map(|_| rng.random_bool(0.6)).collect();
            let (mut h2, mut t2, mut wh2, mut wt2) = (h.clone(), t.clone(), wh.clone(), wt.clone());
            for k in 0..2 {
                for j in 0..64 {
                    if !masks[k * 64 + j] {
                        h2[2 * k * 64 + j] = junk;
                        t2[(2 * k + 1) * 64 + j] = -junk;
                    }
                }
            }
            for j in 0..64 {
                if !(masks[j] && masks[64 + j]) {
                    wh2[64 + j] = junk;
                    wt2[64 + j] = junk * 0.5;
                }
            }
            prop_assert_eq!(epe(&h, &t, &masks, s).unwrap(), epe(&h2, &t2, &masks, s).unwrap());
            let (a, b) = (vrmse(&wh, &wt, &masks, s).unwrap(), vrmse(&wh2, &wt2, &masks, s).unwrap());
            prop_assert_eq!(a[1], b[1]);
        }
    }
}
