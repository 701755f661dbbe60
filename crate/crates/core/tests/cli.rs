use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_swarm-phase"));
    cmd.env_remove("SWARM_PHASE_WORKERS");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value_of(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .to_string()
}

#[test]
fn config_precedence_file_env_flag() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "# test config\nalpha = 3\nseed = 7\nworkers = 1\n").unwrap();
    let p = path.to_str().unwrap();

    let o = bin().args(["--config", p, "--print-config"]).env("SWARM_PHASE_WORKERS", "3").output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(value_of(&text, "alpha"), "3");
    assert_eq!(value_of(&text, "seed"), "7");
    assert_eq!(value_of(&text, "workers"), "3");

    let o = bin().args(["--config", p, "--seed", "9", "--set", "workers=2", "--print-config"]).output().unwrap();
    let text = stdout(&o);
    assert_eq!(value_of(&text, "seed"), "9");
    assert_eq!(value_of(&text, "workers"), "2");
}

#[test]
fn invalid_configuration_exits_2() {
    for args in [
        vec!["solve", "--m", "0"],
        vec!["solve", "--m", "-1"],
        vec!["solve", "--alpha", "-1"],
        vec!["solve", "--set", "no_such_key=1"],
        vec!["solve", "--grid", "hex:10"],
        vec!["solve", "--grid", "radial:64:0.5", "--m", "10"],
        vec!["critical", "--grid", "radial:256:auto", "--boundary", "c1", "--lo", "0.5", "--hi", "1"],
    ] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains("error"), "{args:?}");
    }
    let o = run(&["solve", "--m", "0"]);
    assert!(stderr(&o).contains("mass must be positive"));
}

#[test]
fn missing_config_file_is_reported() {
    let o = run(&["--config", "/nonexistent/run.cfg", "solve"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solve_writes_fields_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["solve", "--m", "1", "--grid", "radial:512:auto", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let e: f64 = value_of(&text, "energy").parse().unwrap();
    assert!((e - 1.8 * 2f64.powf(-2.0 / 3.0)).abs() < 5e-3);
    assert_eq!(value_of(&text, "phase"), "P1");

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], serde_json::Value::Bool(true));
    assert!(report["checks"].as_array().unwrap().len() >= 3);

    let fields = std::fs::read_to_string(out.join("fields.csv")).unwrap();
    let mut lines = fields.lines();
    assert_eq!(lines.next().unwrap(), "index,x,y,z,rho,phi,neg_laplacian");
    assert_eq!(lines.count(), 512);
}

#[test]
fn iteration_cap_reports_nonconvergence() {
    let o = run(&["solve", "--m", "1", "--grid", "radial:256:auto", "--max-iters", "1", "--starts", "seeded-random", "--gap-tol", "1e-14"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn sweep(dir: &Path, name: &str, workers: &str) -> Vec<u8> {
    let path = dir.join(name);
    let o = run(&[
        "sweep",
        "--masses",
        "0.5,1,3",
        "--grid",
        "radial:256:auto",
        "--workers",
        workers,
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::read(path).unwrap()
}

#[test]
fn sweep_is_reproducible_across_runs_and_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = sweep(dir.path(), "a.csv", "1");
    let b = sweep(dir.path(), "b.csv", "1");
    let c = sweep(dir.path(), "c.csv", "2");
    assert_eq!(a, b);
    assert_eq!(a, c);

    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..12], ["alpha", "m", "energy", "mu", "gap", "phase", "saturated_volume", "intermediate_volume", "diameter_ratio", "start", "grid", "wall_time"]);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * 4);
    for mass_rows in rows.chunks(4) {
        assert_eq!(mass_rows.iter().filter(|r| r[12] == "1").count(), 1);
    }
}

#[test]
fn sweep_log_range() {
    let o = run(&["sweep", "--m-min", "0.5", "--m-max", "2", "--m-count", "3", "--grid", "radial:128:auto", "--starts", "annulus"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let masses: Vec<f64> = stdout(&o).lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(masses.len(), 3);
    assert!((masses[0] - 0.5).abs() < 1e-12 && (masses[1] - 1.0).abs() < 1e-12 && (masses[2] - 2.0).abs() < 1e-12);
}

#[test]
fn dump_formats() {
    let dir = tempfile::tempdir().unwrap();
    let bin_path = dir.path().join("fields.bin");
    let o = run(&["dump", "--grid", "radial:64:auto", "--format", "binary", "--out", bin_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(&bin_path).unwrap();
    assert_eq!(&bytes[..8], b"SWPDUMP1");

    let o = run(&["dump", "--grid", "radial:64:auto"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 65);

    let o = run(&["dump", "--grid", "radial:64:auto", "--format", "binary"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn critical_reports_both_boundaries() {
    let o = run(&["critical", "--grid", "radial:512:2.5", "--lo", "1", "--hi", "3", "--width", "0.1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("c1 = [") && text.contains("c2 = ["));
    assert_eq!(value_of(&text, "coincide"), "true");
}

#[test]
fn verify_quick_and_injected_fault() {
    let o = run(&["verify", "quick"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("[FAIL]"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("verify.json");
    let o = run(&["verify", "quick", "--inject-fault", "--out", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let failed: Vec<&str> = text.lines().filter(|l| l.starts_with("[FAIL]")).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].contains("fft-vs-direct"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(report["passed"], serde_json::Value::Bool(false));
}

#[test]
fn no_command_is_a_usage_error() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
}
