//! Quick numerical self-tests: objective gradients, operator adjoints,
//! the soft-threshold prox and wavelet reconstruction.

use crate::diffops::{adjoint_mismatch, DivergenceOp, HydroDOp, HydroLOp, LaplacianOp, LinearFieldOperator};
use crate::energy::{
    gradient_check, DisplacementParam, ForwardModel, HydroMode, JointObjective, LayerObjective, OmegaSlot,
    SolverConfig,
};
use crate::grid::{GridShape, PressureGrid};
use crate::synth::{generate_dataset, MaskStyle, SyntheticSpec};
use crate::wavelet::{soft_threshold, WaveletBasis, WaveletFamily};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

fn result(name: &str, value: f64, tolerance: f64) -> CheckResult {
    CheckResult { name: name.to_string(), passed: value < tolerance, value, tolerance }
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn check_adjoints(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = GridShape::new(8, 16).expect("valid shape");
    let grid = PressureGrid::new(&[1000.0, 940.0, 900.0, 800.0]).expect("valid levels");
    let ops: [(&str, Box<dyn LinearFieldOperator>); 4] = [
        ("adjoint divergence", Box::new(DivergenceOp(shape))),
        ("adjoint laplacian", Box::new(LaplacianOp(shape))),
        ("adjoint D", Box::new(HydroDOp { grid: grid.clone(), shape })),
        ("adjoint L", Box::new(HydroLOp { layers: 3, m: shape.len() })),
    ];
    ops.iter()
        .map(|(name, op)| {
            let worst = (0..20)
                .map(|_| {
                    let u = rand_vec(op.input_len(), &mut rng);
                    let v = rand_vec(op.output_len(), &mut rng);
                    adjoint_mismatch(op.as_ref(), &u, &v)
                })
                .fold(0.0, f64::max);
            result(name, worst, 1e-10)
        })
        .collect()
}

pub fn check_prox(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let v: f64 = rng.random_range(-3.0..3.0);
        let lambda: f64 = rng.random_range(0.0..2.0);
        let p = soft_threshold(v, lambda).expect("non-negative lambda");
        let f = |u: f64| lambda * u.abs() + 0.5 * (u - v) * (u - v);
        // optimality: no grid neighbour does better
        for i in -2000..=2000 {
            let u = p + i as f64 * 1e-3;
            worst = worst.max(f(p) - f(u));
        }
    }
    result("prox optimality", worst, 1e-12)
}

pub fn check_wavelet(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = GridShape::square(32).expect("valid shape");
    let basis = WaveletBasis::new(WaveletFamily::Coif5, shape, 3).expect("valid depth");
    let x = rand_vec(shape.len(), &mut rng);
    let back = basis.inverse(&basis.forward(&x).expect("plane")).expect("plane");
    let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    result("wavelet reconstruction", err, 1e-10)
}

pub fn check_gradients(seed: u64) -> Vec<CheckResult> {
    let spec = SyntheticSpec {
        rows: 16,
        cols: 16,
        levels: vec![1000.0, 950.0, 900.0, 850.0],
        sigma: 0.05,
        mask: MaskStyle::Random { coverage: 0.7 },
        seed,
        ..SyntheticSpec::default()
    };
    let ds = generate_dataset(&spec).expect("valid spec");
    let mut cfg = SolverConfig::recommended(3, ds.gamma.clone());
    cfg.depth = Some(2);
    let model = ForwardModel::from_config(ds.truth.shape, ds.grid.clone(), &cfg).expect("valid config");
    let m = ds.truth.shape.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ds.truth.clone();
    state.d.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    let u_d: Vec<f64> = (0..3 * m).map(|_| rng.random_range(-0.1..0.1)).collect();
    let c_target: Vec<f64> = state.c.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    let mut out = Vec::new();
    for (name, hydro) in [("gradient joint 3d", HydroMode::Off), ("gradient joint hard", HydroMode::Hard)] {
        let obj = JointObjective {
            model: &model,
            obs: &ds.obs,
            cfg: &cfg,
            hydro,
            omega_free: true,
            u_d: &u_d,
            c_target: Some(&c_target),
            param: DisplacementParam::Wavelet,
            parallel: true,
        };
        out.push(result(name, gradient_check(&obj, &obj.pack(&state), 1e-4, 10, seed).max_rel_error, 1e-5));
    }
    let obj = LayerObjective {
        model: &model,
        obs: &ds.obs,
        cfg: &cfg,
        k: 1,
        hydro: HydroMode::Hard,
        u_d: Some(&u_d[m..2 * m]),
        omega: [
            OmegaSlot::Free { target: Some(state.omega_level(1).to_vec()) },
            OmegaSlot::Free { target: Some(state.omega_level(2).to_vec()) },
        ],
        c_target: Some(&c_target[3 * m..6 * m]),
        param: DisplacementParam::Wavelet,
    };
    let x = obj.pack(state.d_layer(1), state.omega_level(1), state.omega_level(2), state.c_layer(1));
    out.push(result("gradient layer split", gradient_check(&obj, &x, 1e-4, 10, seed).max_rel_error, 1e-5));
    out
}

/// Every self-test with a fixed seed.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = check_gradients(1);
    out.extend(check_adjoints(2));
    out.push(check_prox(3));
    out.push(check_wavelet(4));
    out
}
