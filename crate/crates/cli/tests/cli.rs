use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = r#"
version = 1
[bath]
kappa = 2.0
omega0 = 1.0
gamma = 0.5
beta = 0.02
[noise]
omega_n = 0.75
nu = 1.0
seed = 11
[system]
epsilon0 = 1.0
v = 1.0
initial_sz = 1.0
[grid]
horizon = 4.0
tau = 6.0
t2 = 1.0
"#;

fn ttcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttcf")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn body(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n")
}

fn columns(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn dynamics_writes_both_modes_and_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let out = tmp.path().join("out");
    let kernels = tmp.path().join("kernels.csv");
    let o = ttcf(&["dynamics", "--config", &cfg, "--out", out.to_str().unwrap(), "--dump-kernels", kernels.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "single_time.csv", "dynamics_qrt.csv", "dynamics_qrt_plus.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(kernels.exists());
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert!(resolved["dt"].as_f64().unwrap() > 0.0);
    let dt = resolved["dt"].as_f64().unwrap();
    assert!((resolved["t2"].as_f64().unwrap() - 1.0).abs() <= dt / 2.0);
    assert_eq!(resolved["config"]["noise"]["s1_denominator"], "eta");

    let (header, rows) = columns(&out.join("dynamics_qrt_plus.csv"));
    assert_eq!(header[2], "re_zz");
    assert_eq!(rows[0][2], 1.0);
    // floats carry 17 significant digits
    let text = fs::read_to_string(out.join("dynamics_qrt.csv")).unwrap();
    let sample = text.lines().find(|l| !l.starts_with('#') && !l.starts_with("tau")).unwrap();
    assert_eq!(sample.split(',').nth(2).unwrap().split('e').next().unwrap().len(), 18);
}

#[test]
fn zero_noise_leaves_alpha_columns_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &BASE.replace("omega_n = 0.75", "omega_n = 0.0"));
    let out = tmp.path().join("out");
    let o = ttcf(&["dynamics", "--config", &cfg, "--out", out.to_str().unwrap(), "--mode", "qrt+"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("dynamics_qrt.csv").exists());
    let (header, rows) = columns(&out.join("dynamics_qrt_plus.csv"));
    for (c, name) in header.iter().enumerate().filter(|(_, h)| h.contains("_a")) {
        for r in &rows {
            assert!(r[c].abs() < 1e-10, "{name} = {}", r[c]);
        }
    }
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{BASE}\n[sweep]\nnu = [0.5, 1.0]\nomega_n = [0.25, 0.75]\n").replace("tau = 6.0", "tau = 3.0");
    let cfg = write_config(tmp.path(), &text);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (dir, w) in [(&a, "1"), (&b, "3")] {
        let o = ttcf(&["sweep", "--config", &cfg, "--out", dir.to_str().unwrap(), "--workers", w]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(a.join("sweep.csv")).unwrap(), fs::read(b.join("sweep.csv")).unwrap());
    let text = body(&a.join("sweep.csv"));
    let idx: Vec<&str> = text.lines().skip(1).map(|l| &l[..3]).collect();
    assert_eq!(idx, ["0,0", "0,1", "1,0", "1,1"]);

    let c = tmp.path().join("c");
    let d = tmp.path().join("d");
    for dir in [&c, &d] {
        let o = ttcf(&["dynamics", "--config", &cfg, "--out", dir.to_str().unwrap()]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(c.join("dynamics_qrt.csv")).unwrap(), fs::read(d.join("dynamics_qrt.csv")).unwrap());
}

#[test]
fn spectrum_flags_and_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let out = tmp.path().join("out");
    let o = ttcf(&["spectrum", "--config", &cfg, "--out", out.to_str().unwrap(), "--power-mode", "abs2", "--mode", "both"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let head = fs::read_to_string(out.join("spectrum_qrt_plus.csv")).unwrap();
    assert!(head.contains("# power_mode=abs2"));
    let (_, rows) = columns(&out.join("spectrum_qrt_plus.csv"));
    assert!(rows.iter().all(|r| r[1] >= 0.0 && r[2] >= 0.0));
    let peaks: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("peaks.json")).unwrap()).unwrap();
    assert_eq!(peaks.as_array().unwrap().len(), 2);
}

#[test]
fn silent_correlator_has_no_peaks() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &BASE.replace("v = 1.0", "v = 0.0"));
    let out = tmp.path().join("out");
    let o = ttcf(&["spectrum", "--config", &cfg, "--out", out.to_str().unwrap(), "--mode", "qrt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let peaks: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("peaks.json")).unwrap()).unwrap();
    assert!(peaks[0]["absorption"].as_array().unwrap().is_empty());
}

#[test]
fn missing_field_exits_2_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &BASE.replace("gamma = 0.5\n", ""));
    let o = ttcf(&["dynamics", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bath") && err.contains("gamma"), "{err}");
}

#[test]
fn bad_values_and_flags_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &BASE.replace("beta = 0.02", "beta = -1.0"));
    let o = ttcf(&["dynamics", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(tmp.path(), BASE);
    assert_eq!(ttcf(&["dynamics", "--config", &cfg, "--mode", "sideways"]).status.code(), Some(2));
    let coarse = write_config(tmp.path(), &BASE.replace("[grid]", "[grid]\ndt = 0.1"));
    assert_eq!(ttcf(&["dynamics", "--config", &coarse]).status.code(), Some(2));
}

#[test]
fn unphysical_run_exits_3() {
    // the literal two-time kernels leave the physical range at low temperature
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{BASE}\n[model]\nkernel_form = \"literal\"\n")
        .replace("beta = 0.02", "beta = 50.0")
        .replace("horizon = 4.0", "horizon = 20.0")
        .replace("t2 = 1.0", "t2 = 10.0")
        .replace("tau = 6.0", "tau = 40.0");
    let cfg = write_config(tmp.path(), &text);
    let o = ttcf(&["dynamics", "--config", &cfg, "--out", tmp.path().to_str().unwrap(), "--mode", "qrt+"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validate_passes_and_mutation_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let text = BASE.replace("tau = 6.0", "tau = 2.0");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("v");
    let o = ttcf(&["validate", "--config", &cfg, "--out", out.to_str().unwrap(), "--paths", "2000"]);
    assert!(o.status.success(), "{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("validation.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["correlators"].as_array().unwrap().len(), 3);

    let o = ttcf(&["validate", "--config", &cfg, "--out", out.to_str().unwrap(), "--paths", "2000", "--mutate-sign", "0,2"]);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("validation.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], false);
}

#[test]
fn validate_without_noise_agrees_to_integration_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = BASE.replace("omega_n = 0.75", "omega_n = 0.0").replace("tau = 6.0", "tau = 2.0");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("v");
    let o = ttcf(&["validate", "--config", &cfg, "--out", out.to_str().unwrap(), "--paths", "100"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("validation.json")).unwrap()).unwrap();
    // every path is the same deterministic run, so the standard error is zero
    for c in report["correlators"].as_array().unwrap() {
        assert!(c["max_abs_difference"].as_f64().unwrap() < 1e-8, "{c}");
        assert!(c["max_z"].as_f64().unwrap() < 1.0, "{c}");
    }
}

#[test]
fn too_few_paths_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let o = ttcf(&["validate", "--config", &cfg, "--paths", "10"]);
    assert_eq!(o.status.code(), Some(2));
}
