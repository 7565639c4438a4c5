use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vcsel-snn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = "[pipeline]\nn_nodes = 16\n";

#[test]
fn init_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.toml");
    assert!(run(&["init-config", "--out", p(&out)]).status.success());
    let cfg = vcsel_snn::config::ExperimentConfig::load(&out).unwrap();
    assert_eq!(cfg, Default::default());
}

#[test]
fn small_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = run(&["run", "--config", p(&cfg), "--out", p(&out), "--plot"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "raster.csv",
        "confusion.csv",
        "weights.csv",
        "report.json",
        "raster.svg",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let confusion = std::fs::read_to_string(out.join("confusion.csv")).unwrap();
    let total: usize = confusion
        .lines()
        .skip(1)
        .flat_map(|l| {
            l.split(',')
                .skip(1)
                .map(|v| v.parse::<usize>().unwrap())
                .collect::<Vec<_>>()
        })
        .sum();
    assert_eq!(total, 120);
    let raster = std::fs::read_to_string(out.join("raster.csv")).unwrap();
    assert_eq!(raster.lines().count(), 150);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "run");
    assert!(manifest["artifacts"]["raster"].is_string());
}

#[test]
fn unwritable_output_fails_without_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = blocker.join("run");
    let o = run(&["run", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn calibrate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let empty = write_config(
        dir.path(),
        "[calibration.injection_amplitude]\nmin = 8.0\nmax = 9.0\nsteps = 0\n",
    );
    let o = run(&[
        "calibrate",
        "--config",
        p(&empty),
        "--out",
        p(&dir.path().join("a.toml")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("injection_amplitude"));

    let deep = dir.path().join("deep.toml");
    std::fs::write(
        &deep,
        "[calibration]\nlock_time = 2e-8\n[calibration.injection_amplitude]\nmin = 12.0\nmax = 13.0\nsteps = 2\n\
         [calibration.detuning]\nmin = -3e9\nmax = -3e9\nsteps = 1\n",
    )
    .unwrap();
    let o = run(&[
        "calibrate",
        "--config",
        p(&deep),
        "--out",
        p(&dir.path().join("b.toml")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn calibrate_finds_excitable_point_on_straddling_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[laser]\ninjection_amplitude = 1.0\n[calibration]\nlock_time = 5e-8\n\
         [calibration.injection_amplitude]\nmin = 8.0\nmax = 10.0\nsteps = 5\n\
         [calibration.detuning]\nmin = -3e9\nmax = -3e9\nsteps = 1\n",
    );
    let out = dir.path().join("cal.toml");
    let o = run(&["calibrate", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cal = vcsel_snn::config::ExperimentConfig::load(&out).unwrap();
    let rec = cal.calibrated.expect("calibration record");
    assert!(rec.margin > 0.0);
    assert!(cal.laser.injection_amplitude > rec.locking_boundary);
}

#[test]
fn sweep_rejects_zero_runs_and_writes_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[experiment]\nmodel = \"fast_slow\"\n[pipeline]\nn_nodes = 32\n",
    );
    let out = dir.path().join("sweep");
    let o = run(&["sweep", "--config", p(&cfg), "--out", p(&out), "--runs", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&[
        "sweep",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--sizes",
        "1:3",
        "--runs",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("error_curve.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean"));
}

#[test]
fn simulate_trace_writes_drive_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("trace");
    let o = run(&["simulate-trace", "--config", p(&cfg), "--out", p(&out), "--points", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("time_s,power_au"));
    assert!(out.join("drive.csv").exists() && out.join("manifest.json").exists());
}

#[test]
fn missing_config_is_an_error() {
    let o = run(&["run", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
}
