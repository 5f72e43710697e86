use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hyperfcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperfcl")).args(args).output().unwrap()
}

const TINY: &str = r#"{
  "num_clients": 2,
  "local_epochs": 1,
  "rounds_per_task": 1,
  "shared_initial": [1],
  "shared_pool": [],
  "unique_pools": [[2], [3]],
  "images_per_client": 10,
  "server_steps_per_round": 2
}"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn check_passes() {
    let out = hyperfcl(&["check"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 6);
    assert!(!text.contains("FAIL"));
}

#[test]
fn missing_config_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let missing = dir.path().join("nope.json");
    let out = hyperfcl(&["run", "--config", missing.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert!(!out_dir.exists());
}

#[test]
fn bad_flags_print_usage() {
    for args in [&["run"][..], &["run", "--config", "x.json", "--mode", "fedprox"], &["frobnicate"]] {
        let out = hyperfcl(args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("Usage") || err.contains("--help"), "{args:?}: {err}");
    }
}

#[test]
fn invalid_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"local_epochs": 0}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = hyperfcl(&["run", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("local_epochs"));
    assert!(!out_dir.exists());
}

#[test]
fn run_writes_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    for mode in ["fedavg", "feddah"] {
        // summary.json embeds out_dir, so both runs write to the same place
        let a = dir.path().join(format!("{mode}_first"));
        let b = dir.path().join(mode);
        for i in 0..2 {
            let out = hyperfcl(&["run", "--config", &cfg, "--mode", mode, "--seed", "7", "--out", b.to_str().unwrap()]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            if i == 0 {
                fs::rename(&b, &a).unwrap();
            }
        }
        for f in ["metrics.csv", "summary.json"] {
            assert!(fs::read_to_string(a.join(f)).unwrap() == fs::read_to_string(b.join(f)).unwrap(), "{mode} {f}");
        }
        for c in 0..2 {
            assert!(a.join(format!("dice_client_{c}.svg")).exists());
        }
        let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
        // two slots of one round each, two clients
        assert_eq!(csv.lines().count(), 1 + 4);
        assert!(csv.lines().nth(1).unwrap().starts_with(&format!("{mode}-seed7,{mode},0,0,1,")));
        let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["seed"], 7);
        assert_eq!(summary["config"]["mode"], mode);
        assert_eq!(a.join("hypernetwork.json").exists(), mode == "feddah");
    }
}

#[test]
fn sequential_flag_matches_parallel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("par");
    let b = dir.path().join("seq");
    assert!(hyperfcl(&["run", "--config", &cfg, "--mode", "local", "--out", a.to_str().unwrap()]).status.success());
    assert!(hyperfcl(&["run", "--config", &cfg, "--mode", "local", "--sequential", "--out", b.to_str().unwrap()])
        .status
        .success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn gen_data_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("data");
    let out = hyperfcl(&["gen-data", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("manifest.json").exists());
    let pgms = walk(&out_dir).into_iter().filter(|p| p.ends_with(".pgm")).count();
    assert!(pgms >= 20, "{pgms}");
}

fn walk(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p.to_string_lossy().into_owned());
        }
    }
    out
}
