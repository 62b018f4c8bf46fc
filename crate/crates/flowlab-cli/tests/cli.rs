//! End-to-end checks of the binary: exit codes, report determinism, oracle
//! tagging, CSV emission, and the explain command.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn flowlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn report_without_meta(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value.as_object_mut().unwrap().remove("meta");
    value
}

#[test]
fn shipped_scenario_exits_zero_with_witness_in_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let csv_dir = dir.path().join("tables");
    let out = flowlab(&[
        "run",
        scenario_dir().join("m2prime.flow").to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--csv-dir",
        csv_dir.to_str().unwrap(),
        "--paths",
        "20000",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let value = report_without_meta(&report);
    assert_eq!(value["overall"], "pass");
    let checks = value["checks"].as_array().unwrap();
    let consistency = checks
        .iter()
        .find(|c| c["check"] == "consistency")
        .expect("consistency check present");
    let lhs = consistency["details"]["witness"]["lhs"]["value"]
        .as_f64()
        .unwrap();
    assert!((lhs - 1.02600).abs() < 5e-5, "witness lhs = {lhs}");
    assert_eq!(consistency["details"]["witness"]["rhs"]["value"], 1.0);

    // every reported number carries its oracle tag
    fn assert_tagged(v: &serde_json::Value) {
        match v {
            serde_json::Value::Object(map) => {
                let has_numeric_payload = map.get("value").is_some_and(|x| x.is_number())
                    || map.get("mean").is_some_and(|x| x.is_number());
                if has_numeric_payload {
                    assert!(
                        map.contains_key("oracle"),
                        "untagged numeric object: {map:?}"
                    );
                }
                map.values().for_each(assert_tagged);
            }
            serde_json::Value::Array(items) => items.iter().for_each(assert_tagged),
            _ => {}
        }
    }
    assert_tagged(&value["checks"]);

    // convergence diagnostics land as CSV tables
    let names: Vec<String> = std::fs::read_dir(&csv_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("revuz")));
    assert!(names.iter().any(|n| n.starts_with("yosida")));
    let revuz_csv = std::fs::read_to_string(
        csv_dir.join(names.iter().find(|n| n.starts_with("revuz")).unwrap()),
    )
    .unwrap();
    assert!(revuz_csv.starts_with("beta_or_n,value,target,abs_error\n"));
}

#[test]
fn same_seed_means_byte_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for path in [&a, &b] {
        let out = flowlab(&[
            "run",
            scenario_dir().join("m3.flow").to_str().unwrap(),
            "--report",
            path.to_str().unwrap(),
            "--seed",
            "5",
            "--paths",
            "20000",
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    let (a, b) = (report_without_meta(&a), report_without_meta(&b));
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn parallel_jobs_reproduce_the_sequential_report() {
    let dir = tempfile::tempdir().unwrap();
    let (seq, par) = (dir.path().join("seq.json"), dir.path().join("par.json"));
    let scenario = scenario_dir().join("m3.flow");
    for (path, jobs) in [(&seq, "1"), (&par, "4")] {
        let out = flowlab(&[
            "run",
            scenario.to_str().unwrap(),
            "--report",
            path.to_str().unwrap(),
            "--paths",
            "20000",
            "--jobs",
            jobs,
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    let (seq, par) = (report_without_meta(&seq), report_without_meta(&par));
    assert_eq!(
        serde_json::to_string(&seq).unwrap(),
        serde_json::to_string(&par).unwrap()
    );
}

#[test]
fn non_metzler_scenario_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.flow");
    std::fs::write(
        &bad,
        r#"{
            "model": {"states": ["1","2"], "m": [1.0,1.0], "L": [-1.0,-0.1,1.0,-1.0], "alpha": "2"},
            "h": [{"resolvent": [1.0,1.0]}],
            "checks": []
        }"#,
    )
    .unwrap();
    let out = flowlab(&["run", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Metzler"), "stderr: {stderr}");
}

#[test]
fn underpowered_statistics_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let weak = dir.path().join("weak.flow");
    std::fs::write(
        &weak,
        r#"{
            "name": "weak",
            "model": {"states": ["1","2"], "m": [1.0,1.0], "L": [-2.0,3.0,0.5,-2.0], "alpha": "2"},
            "h": [{"resolvent": [1.0,1.0]}, {"direct": [1.0,1.0]}],
            "checks": [{"check": "h-independence", "x": "1", "t": "0.5", "seeds": 20}],
            "mc": {"n_paths": 10, "seed": 1, "horizon": "8"},
            "tolerances": {"z": 0.05}
        }"#,
    )
    .unwrap();
    let report = dir.path().join("report.json");
    let out = flowlab(&[
        "run",
        weak.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_scenario_exits_two() {
    let out = flowlab(&["run", "/nonexistent/nowhere.flow"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_priority_flag_file_env() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let scenario = scenario_dir().join("m1.flow");
    // flag wins over the file seed
    let out = Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args([
            "run",
            scenario.to_str().unwrap(),
            "--seed",
            "123",
            "--paths",
            "1000",
            "--report",
            report.to_str().unwrap(),
        ])
        .env("FLOWLAB_SEED", "999")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report_without_meta(&report)["seed"], 123);

    // file wins over the environment
    let out = Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args([
            "run",
            scenario.to_str().unwrap(),
            "--paths",
            "1000",
            "--report",
            report.to_str().unwrap(),
        ])
        .env("FLOWLAB_SEED", "999")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report_without_meta(&report)["seed"], 42);

    // environment used when both are silent
    let dir2 = tempfile::tempdir().unwrap();
    let bare = dir2.path().join("bare.flow");
    std::fs::write(
        &bare,
        r#"{
            "model": {"states": ["1"], "m": [1.0], "L": [0.5], "alpha": "2"},
            "h": [{"resolvent": [1.0]}],
            "checks": []
        }"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args([
            "run",
            bare.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ])
        .env("FLOWLAB_SEED", "999")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report_without_meta(&report)["seed"], 999);
}

#[test]
fn explain_command() {
    let out = flowlab(&["explain", "consistency"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("witness"));
    // deterministic output
    let again = flowlab(&["explain", "consistency"]);
    assert_eq!(out.stdout, again.stdout);

    for check in [
        "markov",
        "strong-markov",
        "h-independence",
        "revuz",
        "yosida",
        "optional-measure",
        "first-passage",
    ] {
        assert_eq!(flowlab(&["explain", check]).status.code(), Some(0));
    }
    assert_eq!(flowlab(&["explain", "bogus"]).status.code(), Some(2));
}

#[test]
fn paths_dump_has_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("paths.csv");
    let out = flowlab(&[
        "paths",
        scenario_dir().join("m2prime.flow").to_str().unwrap(),
        "--n",
        "5",
        "--seed",
        "3",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&out_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "stream_index,time,state");
    let mut seen_streams = std::collections::BTreeSet::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3, "line {line:?}");
        let stream: u64 = fields[0].parse().unwrap();
        let _time: f64 = fields[1].parse().unwrap();
        seen_streams.insert(stream);
        assert!(["1", "2", "Δ"].contains(&fields[2]), "state {line:?}");
    }
    assert_eq!(seen_streams.len(), 5);

    // identical seed, identical dump
    let again = dir.path().join("paths2.csv");
    flowlab(&[
        "paths",
        scenario_dir().join("m2prime.flow").to_str().unwrap(),
        "--n",
        "5",
        "--seed",
        "3",
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(text, std::fs::read_to_string(&again).unwrap());
}

#[test]
fn report_json_round_trips_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let out = flowlab(&[
        "run",
        scenario_dir().join("m1.flow").to_str().unwrap(),
        "--paths",
        "5000",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&report).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let re = serde_json::to_string_pretty(&value).unwrap();
    let revalue: serde_json::Value = serde_json::from_str(&re).unwrap();
    assert_eq!(value, revalue);
}
