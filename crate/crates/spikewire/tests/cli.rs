use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spikewire(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikewire"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = spikewire(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(dir: &Path) {
    ok(dir, &["generate", "--kind", "mlp", "--sizes", "8,6,3", "--seed", "4", "--out", "model.json", "--data", "data.csv", "--samples", "40"]);
    ok(dir, &["calibrate", "--model", "model.json", "--data", "data.csv", "--timesteps-T", "32", "--out", "cal.json"]);
    ok(dir, &["convert", "--model", "model.json", "--thresholds", "cal.json", "--normalize", "--out", "snn.json"]);
    ok(dir, &["run", "--model", "snn.json", "--data", "data.csv", "--timesteps-T", "32", "--ann", "model.json", "--out", "trace.csv", "--metrics", "metrics.json"]);
}

#[test]
fn full_pipeline_on_toy_mlp() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);

    let cal: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("cal.json")).unwrap()).unwrap();
    assert_eq!(cal["schema"], "spikewire.calibration/1");
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["schema"], "spikewire.trace/1");
    assert!(metrics["metrics"]["l2_rel"].as_f64().unwrap() < 0.05);

    let csv = fs::read_to_string(d.join("trace.csv")).unwrap();
    assert!(csv.starts_with("t,total_spikes,total_acs,"));
    assert_eq!(csv.lines().count(), 33);

    ok(d, &["energy", "--model", "snn.json", "--ann", "model.json", "--data", "data.csv", "--timesteps-T", "32", "--out", "energy.json"]);
    let energy: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("energy.json")).unwrap()).unwrap();
    assert_eq!(energy["schema"], "spikewire.energy/1");
    assert!(energy["report"]["ratio"].as_f64().unwrap() > 0.0);

    let table = ok(d, &["compare", "--model", "snn.json", "--ann", "model.json", "--data", "data.csv", "--timesteps-T", "32", "--out", "cmp.json"]);
    assert_eq!(table.lines().count(), 7);
    let cmp: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("cmp.json")).unwrap()).unwrap();
    let ts: Vec<u64> = cmp["rows"].as_array().unwrap().iter().map(|r| r["t"].as_u64().unwrap()).collect();
    assert_eq!(ts, [1, 2, 4, 8, 16, 32]);
}

#[test]
fn same_seed_gives_identical_trace() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for f in ["data.csv", "cal.json", "trace.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn json_trace_format_carries_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    ok(d, &["run", "--model", "snn.json", "--data", "data.csv", "--trace-format", "json", "--out", "trace.out"]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("trace.out")).unwrap()).unwrap();
    assert_eq!(v["schema"], "spikewire.trace/1");
}

#[test]
fn env_overrides_flag_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let out = Command::new(env!("CARGO_BIN_EXE_spikewire"))
        .current_dir(d)
        .env("SPIKEWIRE_TIMESTEPS_T", "5")
        .args(["run", "--model", "snn.json", "--data", "data.csv", "--out", "t5.csv"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(d.join("t5.csv")).unwrap().lines().count(), 6);
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--sizes", "4,3", "--out", "model.json"]);
    fs::write(d.join("empty.csv"), "").unwrap();
    let out = spikewire(d, &["calibrate", "--model", "model.json", "--data", "empty.csv", "--out", "cal.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("cal.json").exists());

    let out = spikewire(d, &["convert", "--model", "missing.json", "--thresholds", "cal.json", "--out", "snn.json"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(d.join("bad.csv"), "1,2\n").unwrap();
    let out = spikewire(d, &["calibrate", "--model", "model.json", "--data", "bad.csv", "--out", "cal.json"]);
    assert_eq!(out.status.code(), Some(2));

    let out = spikewire(d, &["run", "--firing-rule", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}
