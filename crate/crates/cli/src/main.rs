use amv_core::admm::AdmmMode;
use amv_core::energy::ForwardModel;
use amv_core::eval::{evaluation_masks, Estimate};
use amv_core::io::{self, EstimateInfo};
use amv_core::wavelet::WaveletFamily;
use amv_core::{selftest, synth, AdmmOptions, AmvError, EvalReport, PhysicsConstants, SolverConfig, SyntheticSpec, Variant};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "amv", version, about = "Layered atmospheric motion vector estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        /// Synthetic spec (JSON); missing fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate displacements and vertical winds for a dataset.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer error report of one or more estimates against the dataset truth.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "estimate", required = true)]
        estimates: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-pixel EPE maps to this file.
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Run the gradient, adjoint, prox and wavelet self-tests.
    Check,
    /// Fit gamma from the noise-free truth of a dataset.
    CalibrateGamma {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Joint,
    Split,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: AmvError| e.to_string())
}

enum Failure {
    Input(String),
    Solver(String),
    SelfTest,
}

impl From<AmvError> for Failure {
    fn from(err: AmvError) -> Self {
        if err.is_solver_failure() {
            Failure::Solver(err.to_string())
        } else {
            Failure::Input(err.to_string())
        }
    }
}

/// Scalar weight for every layer or one per layer.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Weights {
    Uniform(f64),
    PerLayer(Vec<f64>),
}

impl Weights {
    fn expand(&self, layers: usize) -> Vec<f64> {
        match self {
            Weights::Uniform(v) => vec![*v; layers],
            Weights::PerLayer(v) => v.clone(),
        }
    }
}

/// Estimation settings; anything left out keeps the recommended value.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EstimateConfig {
    alpha_d: Option<Weights>,
    alpha_x: Option<Weights>,
    rho: Option<f64>,
    rho_c: Option<f64>,
    tikhonov: Option<f64>,
    wavelet: Option<WaveletFamily>,
    depth: Option<usize>,
    schedule: Option<Vec<usize>>,
    /// Replaces the dataset's `gamma.json`.
    gamma: Option<PhysicsConstants>,
    admm: Option<AdmmOptions>,
}

impl EstimateConfig {
    fn solver(&self, layers: usize, gamma: PhysicsConstants) -> SolverConfig {
        let mut cfg = SolverConfig::recommended(layers, self.gamma.clone().unwrap_or(gamma));
        if let Some(w) = &self.alpha_d {
            cfg.alpha_d = w.expand(layers);
        }
        if let Some(w) = &self.alpha_x {
            cfg.alpha_x = w.expand(layers);
        }
        cfg.rho = self.rho.unwrap_or(cfg.rho);
        cfg.rho_c = self.rho_c.unwrap_or(cfg.rho_c);
        cfg.tikhonov = self.tikhonov.unwrap_or(cfg.tikhonov);
        cfg.wavelet = self.wavelet.unwrap_or(cfg.wavelet);
        cfg.depth = self.depth.or(cfg.depth);
        cfg.schedule = self.schedule.clone().or(cfg.schedule);
        cfg
    }
}

fn generate(spec: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let spec: SyntheticSpec = match spec {
        Some(p) => io::read_json(p)?,
        None => SyntheticSpec::default(),
    };
    let ds = synth::generate_dataset(&spec)?;
    io::write_dataset(out, &ds)?;
    log::info!("wrote {}-layer {}x{} dataset to {}", ds.truth.layers, spec.rows, spec.cols, out.display());
    Ok(())
}

fn estimate(data: &Path, variant: Variant, config: Option<&Path>, mode: Option<Mode>, out: &Path) -> Result<(), Failure> {
    let files = io::read_dataset(data)?;
    let conf: EstimateConfig = match config {
        Some(p) => io::read_json(p)?,
        None => EstimateConfig::default(),
    };
    let layers = files.obs.layers;
    let cfg = conf.solver(layers, files.gamma.clone());
    let mut opts = conf.admm.clone().unwrap_or_default();
    opts.variant = variant;
    opts.constraint = None;
    if let Some(m) = mode {
        opts.mode = match m {
            Mode::Joint => AdmmMode::Joint,
            Mode::Split => AdmmMode::Split,
        };
    }
    let started = Instant::now();
    let result = amv_core::run_variant(&files.obs, &files.grid, &cfg, &opts)?;
    let runtime = started.elapsed().as_secs_f64();
    if !result.trace.converged {
        log::warn!("{variant}: not converged after {} outer iterations", result.trace.iterations());
    }
    let shape = files.obs.shape;
    let model = ForwardModel::from_config(shape, files.grid.clone(), &cfg)?;
    let x = model.basis.inverse(&result.state.c)?;
    let info = EstimateInfo {
        variant: variant.name().to_string(),
        rows: shape.rows,
        cols: shape.cols,
        layers,
        outer_iterations: result.trace.iterations(),
        converged: result.trace.converged,
        runtime,
        final_objective: result.final_objective(),
    };
    io::write_estimate(out, &info, &result.state.d, &result.state.omega, &x)?;
    fs::write(out.join("trace.csv"), result.trace.to_csv()).map_err(AmvError::from)?;
    println!(
        "{},{},{:.8e},{},{:.8e}",
        info.variant, info.outer_iterations, info.final_objective, info.converged, info.runtime
    );
    Ok(())
}

fn evaluate(data: &Path, estimates: &[PathBuf], out: &Path, maps: Option<&Path>) -> Result<(), Failure> {
    let files = io::read_dataset(data)?;
    let (d_true, w_true) = io::read_truth(data, &files.manifest)?;
    let masks = evaluation_masks(&files.obs);
    let mut report = EvalReport::new(files.obs.shape);
    for dir in estimates {
        let (info, d, w) = io::read_estimate(dir)?;
        if info.layers != files.obs.layers || info.rows != files.obs.shape.rows || info.cols != files.obs.shape.cols {
            return Err(Failure::Input(format!("{} does not match the dataset shape", dir.display())));
        }
        let est = Estimate {
            variant: &info.variant,
            d: &d,
            omega: &w,
            runtime: info.runtime,
            outer_iterations: info.outer_iterations,
            converged: info.converged,
        };
        report.push(&est, &d_true, &w_true, &masks)?;
    }
    fs::write(out, report.to_csv()).map_err(AmvError::from)?;
    if let Some(p) = maps {
        fs::write(p, report.maps_csv()).map_err(AmvError::from)?;
    }
    print!("{}", report.summary_csv());
    Ok(())
}

fn check() -> Result<(), Failure> {
    let mut ok = true;
    for r in selftest::run_all() {
        println!(
            "{} {}: {:.8e} (tolerance {:.8e})",
            if r.passed { "ok" } else { "FAILED" },
            r.name,
            r.value,
            r.tolerance
        );
        ok &= r.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::SelfTest)
    }
}

fn calibrate(data: &Path, out: &Path) -> Result<(), Failure> {
    let files = io::read_dataset(data)?;
    let (x0, x1) = io::read_truth_images(data, &files.manifest)?;
    let (d, w) = io::read_truth(data, &files.manifest)?;
    let fit = synth::calibrate_gamma(&x0, &x1, &d, &w, &files.grid)?;
    if !fit.singular.is_empty() {
        log::warn!("no vertical motion at boundaries {:?}; gamma set to zero there", fit.singular);
    }
    io::write_json(out, &fit.gamma)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { spec, out } => generate(spec.as_deref(), out),
        Command::Estimate { data, variant, config, mode, out } => {
            estimate(data, *variant, config.as_deref(), *mode, out)
        }
        Command::Evaluate { data, estimates, out, maps } => evaluate(data, estimates, out, maps.as_deref()),
        Command::Check => check(),
        Command::CalibrateGamma { data, out } => calibrate(data, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Solver(msg)) => {
            eprintln!("solver failure: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::SelfTest) => {
            eprintln!("self-test failed");
            ExitCode::from(4)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gamma(layers: usize) -> PhysicsConstants {
        PhysicsConstants::new(vec![[0.1, 0.2, 0.3]; layers + 1]).unwrap()
    }

    #[test]
    fn empty_config_is_recommended() {
        let conf: EstimateConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(conf.solver(3, gamma(3)), SolverConfig::recommended(3, gamma(3)));
    }

    #[test]
    fn overrides_apply() {
        let conf: EstimateConfig =
            serde_json::from_str(r#"{"alpha_d": [1, 2], "alpha_x": 0.5, "rho": 2, "depth": 3}"#).unwrap();
        let cfg = conf.solver(2, gamma(2));
        assert_eq!(cfg.alpha_d, vec![1.0, 2.0]);
        assert_eq!(cfg.alpha_x, vec![0.5, 0.5]);
        assert_eq!(cfg.rho, 2.0);
        assert_eq!(cfg.depth, Some(3));
        assert_eq!(cfg.rho_c, 1.0);
    }

    #[test]
    fn gamma_override_replaces_dataset_gamma() {
        let conf = EstimateConfig { gamma: Some(gamma(1)), ..Default::default() };
        let other = PhysicsConstants::new(vec![[0.0; 3]; 2]).unwrap();
        assert_eq!(conf.solver(1, other).gamma, gamma(1));
    }
}
