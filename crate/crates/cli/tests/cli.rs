use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const QUICK: &[&str] = &[
    "--set",
    "channel.trials=2",
    "--set",
    "training.config.epochs=10",
    "--set",
    "training.config.batch_size=32",
    "--set",
    "training.eval_draws=3",
];

fn wisp(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wisp"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn wisp")
}

fn error_json(o: &Output) -> Value {
    let line = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {line}"))
}

#[test]
fn pipeline_writes_every_stage_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = QUICK.to_vec();
    args.push("pipeline");
    let o = wisp(tmp.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let root = tmp.path().join("pipeline");
    for stage in [
        "simulate-csi",
        "estimate",
        "smsp",
        "skeleton-fit",
        "skeleton-predict",
        "incentive-oracle",
        "train-policy",
        "eval-policy",
    ] {
        let report = root.join(stage).join("report.json");
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(v["command"], stage);
        for a in v["artifacts"].as_array().unwrap() {
            assert!(root.join(stage).join(a.as_str().unwrap()).exists(), "{stage}: {a}");
        }
    }
    for stage in top_stages(&root) {
        check_units("", &stage["metrics"]);
    }
    let top: Value = serde_json::from_str(&std::fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    assert_eq!(top["stages"].as_object().unwrap().len(), 8);
    assert!(top["timing"]["wall_time_s"].as_f64().unwrap() > 0.0);
}

#[test]
fn unknown_scenario_key_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("bad.toml");
    std::fs::write(&file, "name = \"bad\"\n[channel]\nframez = 3\n").unwrap();
    let o = wisp(tmp.path(), &["--scenario", file.to_str().unwrap(), "simulate-csi"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"]["kind"], "validation");
    assert_eq!(e["error"]["command"], "simulate-csi");
    assert!(e["error"]["message"].as_str().unwrap().contains("line 3"));
}

#[test]
fn bad_override_and_missing_scenario_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = wisp(tmp.path(), &["--set", "economy.env.v_c=-1", "incentive-oracle"]);
    assert_eq!(o.status.code(), Some(2));
    let o = wisp(tmp.path(), &["--scenario", "no/such/file.toml", "smsp"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "validation");
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = wisp(tmp.path(), &["eval-policy", "--policy", "absent.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"]["kind"], "runtime");
    let o = wisp(tmp.path(), &["skeleton-predict"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn corrupt_dump_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dump = tmp.path().join("junk.bin");
    std::fs::write(&dump, b"NOTADUMP").unwrap();
    let o = wisp(tmp.path(), &["estimate", "--csi", dump.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_json(&o)["error"]["message"].as_str().unwrap().contains("CSIDUMP1"));
}

#[test]
fn show_scenario_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = wisp(tmp.path(), &["--scenario", "ap_sweep", "--seed", "9", "show-scenario"]);
    assert!(o.status.success());
    let file = tmp.path().join("dumped.toml");
    std::fs::write(&file, &o.stdout).unwrap();
    let again = wisp(tmp.path(), &["--scenario", file.to_str().unwrap(), "show-scenario"]);
    assert_eq!(o.stdout, again.stdout);
    assert!(String::from_utf8_lossy(&o.stdout).contains("seed = 9"));
}

const UNIT_SUFFIXES: &[&str] = &[
    "_m", "_deg", "_ns", "_s", "_db", "_count", "_ratio", "_fraction", "_score", "_linear", "_util", "_price",
    "_units", "_qos", "_norm",
];

fn top_stages(root: &Path) -> Vec<Value> {
    std::fs::read_dir(root)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path().join("report.json");
            p.exists().then(|| serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap())
        })
        .collect()
}

/// Every numeric leaf must sit under a key naming its unit.
fn check_units(key: &str, v: &Value) {
    match v {
        Value::Number(_) => assert!(UNIT_SUFFIXES.iter().any(|s| key.ends_with(s)), "metric `{key}` has no unit suffix"),
        Value::Array(a) => a.iter().for_each(|x| check_units(key, x)),
        Value::Object(o) => o.iter().for_each(|(k, x)| check_units(k, x)),
        _ => {}
    }
}
