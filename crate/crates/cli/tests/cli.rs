use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fleet-nmpc"))
}

fn nominal() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/nominal.toml")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary should start")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_accepts_nominal() {
    let o = run(bin().arg("validate").arg(nominal()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("5 agents"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nduration = -1.0\nlinks = []\n").unwrap();
    assert_eq!(run(bin().arg("validate").arg(&bad)).status.code(), Some(1));
    assert_eq!(run(bin().arg("validate").arg(dir.path().join("missing.toml"))).status.code(), Some(1));

    let text = std::fs::read_to_string(nominal()).unwrap().replace("speed = 5.0", "speed = 5.0\nbogus = 2");
    std::fs::write(&bad, text).unwrap();
    let o = run(bin().arg("run").arg(&bad).arg("--out-dir").arg(dir.path().join("out")));
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("out/run.csv").exists());
}

#[test]
fn synthesize_writes_design() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin().arg("synthesize").arg(nominal()).arg("--out-dir").arg(dir.path()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("terminal_design.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["level"].as_f64().unwrap() > 0.0);
    assert_eq!(v["audit"]["passed"], serde_json::Value::Bool(true));
}

#[test]
fn run_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(bin().arg("run").arg(nominal()).args(["--duration", "1.5", "--seed", "3"]).arg("--out-dir").arg(&out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("simulated 1.5 s"));
    for name in ["run.csv", "summary.json", "terminal_design.json", "trajectories.csv", "sgc.csv"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }

    let log = out.join("run.csv");
    let o = run(bin().arg("replay").arg(&log).arg("--config").arg(nominal()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("0 mismatching rows"));

    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let replayed = stdout(&run(bin().arg("replay").arg(&log)));
    let replayed: serde_json::Value = serde_json::from_str(&replayed).unwrap();
    assert_eq!(replayed["min_pairwise_distance"], summary["metrics"]["min_pairwise_distance"]);

    // A log whose monitor columns were altered no longer reproduces.
    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = header.iter().position(|h| *h == "v").unwrap();
    let mut cells: Vec<String> = lines[3].split(',').map(str::to_owned).collect();
    cells[col] = "1000".into();
    lines[3] = cells.join(",");
    let tampered = dir.path().join("tampered.csv");
    std::fs::write(&tampered, lines.join("\n") + "\n").unwrap();
    assert_eq!(run(bin().arg("replay").arg(&tampered).arg("--config").arg(nominal())).status.code(), Some(3));
}

#[test]
fn unreadable_log_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin().arg("replay").arg(dir.path().join("nope.csv")));
    assert_eq!(o.status.code(), Some(3));
}
