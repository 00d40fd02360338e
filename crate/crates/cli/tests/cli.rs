use std::process::Command;

use csmsckf::io::Manifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_csmsckf"))
}

fn write_config(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(
        &path,
        "schema_version = 1\n[sim]\nduration = 8.0\n[eval]\nmodes = [\"odometry\", \"mm\"]\nseeds = 1\n",
    )
    .unwrap();
    path
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let st = bin().args(["run", "-c"]).arg(&cfg).arg("-o").arg(&out).status().unwrap();
    assert!(st.success());
    let m = Manifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(m.runs.len(), 2);
    for r in &m.runs {
        assert!(out.join(&r.csv).exists());
    }
    assert!(bin().arg("report").arg(&out).status().unwrap().success());

    // A diverged run turns the exit status nonzero.
    let mut bad = m.clone();
    bad.runs[0].diverged = true;
    bad.write(&out.join("manifest.json")).unwrap();
    let st = bin().arg("report").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn simulate_writes_streams() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("world");
    let st = bin().args(["simulate", "--seed", "4", "-c"]).arg(&cfg).arg("-o").arg(&out).status().unwrap();
    assert!(st.success());
    for f in ["imu.csv", "ground_truth.csv", "features.csv", "matches.csv", "map_keyframes.csv", "map_landmarks.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn bad_input_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "schema_version = 9\n").unwrap();
    assert!(!bin().args(["run", "-c"]).arg(&cfg).status().unwrap().success());
    assert!(!bin().args(["run", "--mode", "nope"]).status().unwrap().success());
}
