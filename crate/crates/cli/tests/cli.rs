use nvnmr::control::{DriveVariant, FieldMode};
use nvnmr::engine::Frame;
use nvnmr_cli::artifacts::{self, sweep, write_run, SweepAxis};
use nvnmr_cli::config::ExperimentConfig;
use nvnmr_cli::pipeline::simulate;
use std::path::Path;
use std::process::Command;

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.sample.pair_count = 2;
    c.readout.sensors = 3;
    c.readout.windows = 32;
    c
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn config_round_trips() {
    let mut c = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    c.field.mode = FieldMode::RotatingSample;
    c.field.epsilon_deg = Some(54.0);
    c.drive.variant = DriveVariant::Simple;
    c.drive.phi_error_deg = 3.25;
    c.drive.fslg_segments = Some(12);
    c.sample.beta_field_product = Some(1e-3);
    c.readout.t1_memory = f64::INFINITY;
    c.run.frame = Frame::IpFull;
    c.run.seed = u64::MAX >> 12;
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    // carrier-resolved frames do not fit the step budget at 84 MHz
    assert!(c.resolve().is_err());
    c.run.frame = Frame::IpRwaBs;
    let res = c.resolve().unwrap();
    assert_eq!(res.readout.t1_memory, None);
    let n = res.normalized();
    assert_eq!(ExperimentConfig::from_toml(&n.to_toml()).unwrap(), n);
}

#[test]
fn partial_files_take_defaults_and_unknown_keys_fail() {
    let c = ExperimentConfig::from_toml("[field]\nnu = 2000.0\n").unwrap();
    assert_eq!(c.field.nu, 2000.0);
    assert_eq!(c.drive, ExperimentConfig::default().drive);
    assert!(ExperimentConfig::from_toml("[field]\nspeed = 1.0\n").is_err());
}

#[test]
fn baseline_resolves_with_the_expected_rabi_frequency() {
    let res = ExperimentConfig::default().resolve().unwrap();
    let omega = (2.0f64 / 3.0).sqrt() * 84e6 / 448.0;
    assert!((res.drive.omega - omega).abs() < 1e-6);
    assert!((res.drive.omega / 1e3 - 153.1).abs() < 0.05);
    assert!((res.drive.delta() - res.drive.omega / 2f64.sqrt()).abs() < 1e-6);
    assert!((res.lines[0] - 200.0).abs() < 1.0 && (res.lines[1] - 102.0).abs() < 1.0, "{:?}", res.lines);
    assert!((res.field.epsilon - (1.0f64 / 3f64.sqrt()).acos()).abs() < 1e-12);
    let n = res.normalized();
    assert!(n.sample.beta_field_product.unwrap() > 1e-5 && n.drive.fslg_segments.is_some());
}

#[test]
fn validation_reports_field_paths() {
    let mut c = ExperimentConfig::default();
    c.sample.principal_values.clear();
    let errs = c.resolve().unwrap_err();
    assert!(errs.iter().any(|v| v.field == "sample.principal_values"), "{errs:?}");

    // line (1000 + 40.3) / sqrt 3 = 600.6 Hz against Nyquist 500 Hz
    let mut c = ExperimentConfig::default();
    c.sample.principal_values = vec![[1000.0; 3], [100.0; 3]];
    let errs = c.resolve().unwrap_err();
    assert_eq!(errs.len(), 1, "{errs:?}");
    assert_eq!(errs[0].field, "field.nu");
    assert!(errs[0].message.contains("Nyquist"));

    let mut c = ExperimentConfig::default();
    c.run.frame = Frame::LabExact;
    let errs = c.resolve().unwrap_err();
    assert!(errs.iter().any(|v| v.field == "run.frame" && v.message.contains("ip_rwa_bs")), "{errs:?}");

    let mut c = ExperimentConfig::default();
    c.field.nu = -1.0;
    c.drive.noise_tau_c = 0.0;
    let errs = c.resolve().unwrap_err();
    let fields: Vec<&str> = errs.iter().map(|v| v.field.as_str()).collect();
    assert!(fields.contains(&"field.nu") && fields.contains(&"drive.noise_tau_c"), "{fields:?}");
}

#[test]
fn runs_are_byte_identical_across_seeds_and_threads() {
    let c = small();
    let res = c.resolve().unwrap();
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (d, threads) in dirs.iter().zip([1, 3, 1]) {
        let out = simulate(&res, threads).unwrap();
        write_run(d.path(), &res, &out, true).unwrap();
    }
    for name in [artifacts::TIMESERIES_FILE, artifacts::SPECTRUM_FILE, artifacts::PEAKS_FILE, artifacts::META_FILE, artifacts::CONFIG_FILE] {
        let a = read(dirs[0].path(), name);
        assert_eq!(a, read(dirs[1].path(), name), "{name}");
        assert_eq!(a, read(dirs[2].path(), name), "{name}");
    }
    assert!(dirs[0].path().join(artifacts::SVG_FILE).exists());

    let mut other = c.clone();
    other.run.seed = 2;
    let out = simulate(&other.resolve().unwrap(), 1).unwrap();
    let d = tempfile::tempdir().unwrap();
    write_run(d.path(), &other.resolve().unwrap(), &out, false).unwrap();
    assert_ne!(read(d.path(), artifacts::TIMESERIES_FILE), read(dirs[0].path(), artifacts::TIMESERIES_FILE));
}

#[test]
fn artifact_contents() {
    let c = small();
    let res = c.resolve().unwrap();
    let out = simulate(&res, 1).unwrap();
    let d = tempfile::tempdir().unwrap();
    write_run(d.path(), &res, &out, false).unwrap();
    let ts = String::from_utf8(read(d.path(), artifacts::TIMESERIES_FILE)).unwrap();
    assert!(ts.starts_with("p,t_s,value,stderr\n"));
    assert_eq!(ts.lines().count(), 33);
    let meta: serde_json::Value = serde_json::from_slice(&read(d.path(), artifacts::META_FILE)).unwrap();
    assert_eq!(meta["constants"]["gamma_1h"], nvnmr::consts::GAMMA_1H);
    assert!((meta["derived"]["rabi_hz"].as_f64().unwrap() - res.drive.omega).abs() < 1e-9);
    assert!(meta.get("elapsed_s").is_none());
    let resolved = ExperimentConfig::from_toml(std::str::from_utf8(&read(d.path(), artifacts::CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(resolved, res.normalized());
    let peaks: serde_json::Value = serde_json::from_slice(&read(d.path(), artifacts::PEAKS_FILE)).unwrap();
    assert_eq!(peaks["predicted_hz"].as_array().unwrap().len(), 2);

    let mut timed = c.clone();
    timed.run.bit_reproducible = false;
    let out = simulate(&timed.resolve().unwrap(), 1).unwrap();
    assert!(out.meta.elapsed_s.is_some());
}

#[test]
fn single_value_sweep_equals_run() {
    let c = small();
    let root = tempfile::tempdir().unwrap();
    let rows = sweep(&c, SweepAxis::PhiError, &[1.0], root.path(), 1).unwrap();
    assert_eq!(rows.len(), 1);
    let res = c.resolve().unwrap();
    let out = simulate(&res, 1).unwrap();
    let d = tempfile::tempdir().unwrap();
    write_run(d.path(), &res, &out, false).unwrap();
    let point = artifacts::sweep_dir(root.path(), SweepAxis::PhiError, 1.0);
    for name in [artifacts::TIMESERIES_FILE, artifacts::SPECTRUM_FILE, artifacts::PEAKS_FILE] {
        assert_eq!(read(&point, name), read(d.path(), name), "{name}");
    }
    let summary = String::from_utf8(read(root.path(), artifacts::SUMMARY_FILE)).unwrap();
    assert!(summary.starts_with("phi_error,line_1_hz,peak_1_hz,height_1,shift_1_hz,line_2_hz"));
    assert_eq!(summary.lines().count(), 2);
    assert!(sweep(&c, SweepAxis::PhiError, &[], root.path(), 1).is_err());
    assert!(SweepAxis::PairCount.apply(&c, 2.5).is_err());
    assert_eq!(SweepAxis::PairCount.apply(&c, 5.0).unwrap().sample.pair_count, 5);
}

fn nvnmr(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_nvnmr")).args(args).output().unwrap()
}

#[test]
fn binary_verbs_and_exit_codes() {
    let out = nvnmr(&["predict"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("line 1: 200.0") && text.contains("bloch-siegert: 40.27"), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[sample]\nprincipal_values = []\n").unwrap();
    let out = nvnmr(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("sample.principal_values"));
    assert_eq!(nvnmr(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let missing = dir.path().join("missing.toml");
    assert_eq!(nvnmr(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(1));

    // sixteen pairs cannot keep 5 nm apart inside a 5 nm half-ball
    let crowded = dir.path().join("crowded.toml");
    std::fs::write(&crowded, "[sample]\nexclusion_radius = 5e-9\n[readout]\nsensors = 1\nwindows = 16\n").unwrap();
    assert_eq!(nvnmr(&["run", "--config", crowded.to_str().unwrap(), "--out", dir.path().join("c").to_str().unwrap()]).status.code(), Some(3));

    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, small().to_toml()).unwrap();
    let out_dir = dir.path().join("run");
    let out = nvnmr(&["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--seed", "4", "--threads", "2", "--svg"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join(artifacts::SVG_FILE).exists());
    let resolved = ExperimentConfig::from_toml(&std::fs::read_to_string(out_dir.join(artifacts::CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(resolved.run.seed, 4);

    let sweep_dir = dir.path().join("sweep");
    let out = nvnmr(&["sweep", "--config", cfg.to_str().unwrap(), "--out", sweep_dir.to_str().unwrap(), "--axis", "noise_sigma", "--values", "0,0.01"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sweep_dir.join("noise_sigma_0.01").join(artifacts::META_FILE).exists());
    assert_eq!(std::fs::read_to_string(sweep_dir.join(artifacts::SUMMARY_FILE)).unwrap().lines().count(), 3);
}
