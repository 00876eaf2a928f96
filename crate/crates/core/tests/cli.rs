//! The `neemo` binary end to end: exit codes, artifacts, reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use neemo::shapes::ShapeSpec;

fn neemo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neemo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

const SMALL_FIT: &str = r#"
inner_steps_per_outer = 5
outer_steps = 10
warmup_inner_steps = 20
terminal_inner_steps = 20
snapshot_steps = [0, 5]

[net]
hidden = [16, 16]
group_size = 4
"#;

#[test]
fn gen_then_exact_emd_in_json() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.jsonl");
    assert!(neemo(&["gen", "circles", path(&a), "--n", "2", "--points", "16"]).status.success());
    assert!(neemo(&["--seed", "3", "gen", "subjets", path(&b)]).status.success());
    let out = neemo(&["--format", "json", "emd", path(&a), path(&b)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let value = report["value"].as_f64().unwrap();
    assert!(value > 0.0 && value.is_finite());

    let sink = neemo(&["emd", path(&a), path(&b), "--method", "sinkhorn", "--epsilon", "0.01"]);
    assert!(sink.status.success());
    let s: f64 = stdout(&sink).trim().parse().unwrap();
    assert!(s >= value - 1e-9, "entropic plan cost {s} below exact {value}");
}

#[test]
fn exact_emd_writes_a_plan_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    fs::write(&a, "E,x1,x2\n1,0,0\n").unwrap();
    let b = dir.path().join("b.csv");
    fs::write(&b, "E,x1,x2\n1,3,4\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = neemo(&["--out-dir", path(&out_dir), "emd", path(&a), path(&b), "--plan"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).trim().parse::<f64>().unwrap(), 5.0);
    assert!(out_dir.join("plan.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "emd");
}

#[test]
fn input_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    assert_eq!(neemo(&["emd", path(&missing), path(&missing)]).status.code(), Some(2));

    let a = dir.path().join("a.csv");
    fs::write(&a, "E,x1,x2\n1,0,0\n").unwrap();
    let b = dir.path().join("b.csv");
    fs::write(&b, "E,x1\n1,0\n").unwrap();
    assert_eq!(neemo(&["emd", path(&a), path(&b)]).status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "E,x1,x2\n1,0,zero\n").unwrap();
    assert_eq!(neemo(&["emd", path(&a), path(&bad)]).status.code(), Some(2));

    assert_eq!(neemo(&["emd"]).status.code(), Some(2));
    assert_eq!(neemo(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn fit_writes_artifacts_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let event = dir.path().join("event.csv");
    assert!(neemo(&["gen", "circles", path(&event), "--n", "1", "--points", "32"]).status.success());
    let shape = dir.path().join("shape.toml");
    ShapeSpec::circles(&[(0.4, 0.4, 0.15)], 32).unwrap().save(&shape).unwrap();
    let config = dir.path().join("fit.toml");
    fs::write(&config, SMALL_FIT).unwrap();

    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = neemo(&[
            "--deterministic",
            "--seed",
            "5",
            "--config",
            path(&config),
            "--out-dir",
            path(&out_dir),
            "fit",
            path(&event),
            path(&shape),
            "--svg",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let first = run("one");
    let second = run("two");
    for name in ["trace.jsonl", "shape.toml", "potential.json", "heatmap_final.txt", "frame_final.svg", "manifest.json"] {
        assert!(first.join(name).exists(), "missing {name}");
    }
    assert!(first.join("heatmap_00005.txt").exists());
    assert!(first.join("frame_00000.svg").exists());
    assert_eq!(
        fs::read(first.join("trace.jsonl")).unwrap(),
        fs::read(second.join("trace.jsonl")).unwrap()
    );
    let trace = fs::read_to_string(first.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 10);
}

#[test]
fn fit_rejects_bad_config_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("fit.toml");
    fs::write(&config, "outer_steps = 0\n").unwrap();
    let event = dir.path().join("e.csv");
    fs::write(&event, "E,x1,x2\n1,0,0\n").unwrap();
    let out = neemo(&["--config", path(&config), "fit", path(&event), path(&event)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_check_passes() {
    let out = neemo(&["check", "oracle"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).lines().all(|l| l.starts_with("[PASS]")));
}
