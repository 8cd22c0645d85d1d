use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn amv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amv")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_spec(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("spec.json");
    fs::write(
        &path,
        r#"{"rows": 16, "cols": 16, "levels": [1000, 950, 900], "sigma": 0.02, "seed": 4}"#,
    )
    .unwrap();
    path
}

#[test]
fn generate_estimate_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let spec = small_spec(tmp.path());
    let out = amv(&["generate", "--spec", s(&spec), "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "y0.amv", "y1.amv", "mask0.amsk", "mask1.amsk", "truth_d.amv", "truth_w.amv"] {
        assert!(data.join(f).exists(), "missing {f}");
    }

    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"depth": 2, "admm": {"max_outer": 3}}"#).unwrap();
    let mut dirs = Vec::new();
    for variant in ["2d", "3d-hydro-hard"] {
        let est = tmp.path().join(variant);
        let out = amv(&["estimate", "--data", s(&data), "--variant", variant, "--config", s(&cfg), "--out", s(&est)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let trace = fs::read_to_string(est.join("trace.csv")).unwrap();
        assert!(trace.starts_with("iteration,objective"));
        assert!(trace.lines().count() >= 2 && trace.lines().count() <= 4);
        for f in ["d.amv", "w.amv", "x.amv", "estimate.json"] {
            assert!(est.join(f).exists(), "missing {f}");
        }
        dirs.push(est);
    }

    let report = tmp.path().join("report.csv");
    let maps = tmp.path().join("maps.csv");
    let out = amv(&[
        "evaluate", "--data", s(&data), "--estimate", s(&dirs[0]), "--estimate", s(&dirs[1]), "--out", s(&report),
        "--maps", s(&maps),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,layer,epe,vrmse");
    // two variants, two layers
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[1].starts_with("2d,0,"));
    let epe = lines[1].split(',').nth(2).unwrap();
    let mantissa = epe.split('e').next().unwrap();
    assert_eq!(mantissa.trim_start_matches('-').replace('.', "").len(), 9);
    assert_eq!(fs::read_to_string(&maps).unwrap().lines().count(), 1 + 2 * 2 * 256);
}

#[test]
fn truth_scores_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let spec = small_spec(tmp.path());
    assert!(amv(&["generate", "--spec", s(&spec), "--out", s(&data)]).status.success());
    // an estimate directory holding the truth itself
    let est = tmp.path().join("truth");
    fs::create_dir_all(&est).unwrap();
    fs::copy(data.join("truth_d.amv"), est.join("d.amv")).unwrap();
    fs::copy(data.join("truth_w.amv"), est.join("w.amv")).unwrap();
    fs::write(
        est.join("estimate.json"),
        r#"{"variant":"truth","rows":16,"cols":16,"layers":2,"outer_iterations":0,"converged":true,"runtime":0,"final_objective":0}"#,
    )
    .unwrap();
    let report = tmp.path().join("r.csv");
    let out = amv(&["evaluate", "--data", s(&data), "--estimate", s(&est), "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for line in fs::read_to_string(&report).unwrap().lines().skip(1) {
        let epe: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(epe, 0.0);
    }
}

#[test]
fn calibrate_gamma_recovers_dataset_gamma() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let spec = small_spec(tmp.path());
    assert!(amv(&["generate", "--spec", s(&spec), "--out", s(&data)]).status.success());
    let out_path = tmp.path().join("gamma.json");
    let out = amv(&["calibrate-gamma", "--data", s(&data), "--out", s(&out_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fitted: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out_path).unwrap()).unwrap();
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("gamma.json")).unwrap()).unwrap();
    let flat = |v: &serde_json::Value| -> Vec<f64> {
        let mut out = Vec::new();
        fn walk(v: &serde_json::Value, out: &mut Vec<f64>) {
            match v {
                serde_json::Value::Number(n) => out.push(n.as_f64().unwrap()),
                serde_json::Value::Array(a) => a.iter().for_each(|x| walk(x, out)),
                serde_json::Value::Object(o) => o.values().for_each(|x| walk(x, out)),
                _ => {}
            }
        }
        walk(v, &mut out);
        out
    };
    let (a, b) = (flat(&fitted), flat(&truth));
    assert_eq!(a.len(), b.len());
    // boundary levels carry no vertical motion and fit to zero
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in a.iter().zip(&b).skip(3).take(a.len() - 6) {
        assert!((x - y).abs() < 1e-4 * scale, "{x} vs {y}");
    }
}

#[test]
fn check_passes() {
    let out = amv(&["check"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 7);
    assert!(!text.contains("FAILED"));
}

#[test]
fn invalid_input_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = amv(&["estimate", "--data", s(&missing), "--variant", "3d", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"rows": 12}"#).unwrap();
    let out = amv(&["generate", "--spec", s(&bad), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = amv(&["estimate", "--data", s(&missing), "--variant", "4d", "--out", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_field_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let spec = small_spec(tmp.path());
    assert!(amv(&["generate", "--spec", s(&spec), "--out", s(&data)]).status.success());
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"alpha": 1.0}"#).unwrap();
    let out = amv(&["estimate", "--data", s(&data), "--variant", "3d", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn split_mode_on_odd_layers_without_permission_fails_as_input() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"rows": 16, "cols": 16, "levels": [1000, 950, 900, 850], "seed": 2}"#).unwrap();
    assert!(amv(&["generate", "--spec", s(&spec), "--out", s(&data)]).status.success());
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"depth": 2, "admm": {"allow_odd_k": false, "max_outer": 1}}"#).unwrap();
    let out = amv(&[
        "estimate", "--data", s(&data), "--variant", "3d", "--mode", "split", "--config", s(&cfg), "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
