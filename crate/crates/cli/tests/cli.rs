//! End-to-end runs of the `windcf` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn windcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_windcf")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three months of data and a model trained on them, shared by the tests.
struct Pipeline {
    _dir: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
}

fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data.csv");
        let model = dir.path().join("model.json");
        let out = windcf(&["generate", "--years", "0.25", "--seed", "3", "--out", s(&data)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = windcf(&["train", "--data", s(&data), "--out", s(&model)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(summary["classifier"]["balanced_accuracy"].as_f64().unwrap() > 0.8);
        Pipeline { _dir: dir, data, model }
    })
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn usage_and_version_exit_codes() {
    let out = windcf(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(windcf(&["--version"]).status.code(), Some(0));
    assert_eq!(windcf(&["--help"]).status.code(), Some(0));
    assert_eq!(windcf(&["simulate", "--bogus"]).status.code(), Some(1));
    // Missing required input given neither as flag nor in a config file.
    assert_eq!(windcf(&["train"]).status.code(), Some(1));
}

#[test]
fn bad_inputs_exit_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "timestamp,P,TN,TT,TA,WS,label\n2024-01-01T00:00:00,x,1,1,1,1,0\n").unwrap();
    let model = dir.path().join("m.json");
    let out = windcf(&["train", "--data", s(&bad), "--out", s(&model)]);
    assert_eq!(out.status.code(), Some(2));
    let out = windcf(&["train", "--data", s(&dir.path().join("missing.csv")), "--out", s(&model)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn explain_on_a_good_sample_is_the_identity() {
    let p = pipeline();
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p.model).unwrap()).unwrap();
    let threshold = model["classifier"]["threshold"].as_f64().unwrap();
    let good = rows(&p.data).into_iter().find(|r| &r[6] == "0" && &r[1] != "0.0").unwrap();
    let out = windcf(&["explain", "--model", s(&p.model), "--data", s(&p.data), "--at", &good[0], "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    if v["class"] == 1 {
        // The classifier may disagree with the label; then it is not a no-op.
        assert!(v["score"].as_f64().unwrap() > threshold);
        return;
    }
    assert_eq!(v["message"], "instance already classified good");
    let cf = &v["result"]["counterfactual"];
    for f in ["P", "TN", "TT", "TA", "WS"] {
        assert_eq!(cf[f], v["instance"][f], "{f}");
    }
    assert_eq!(v["result"]["objective"], 0.0);

    let text = windcf(&["explain", "--model", s(&p.model), "--data", s(&p.data), "--at", &good[0]]);
    assert!(String::from_utf8_lossy(&text.stdout).starts_with("instance already classified good"));
}

#[test]
fn explain_instance_file_with_separate_surrogates() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let bundle: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p.model).unwrap()).unwrap();
    let threshold = bundle["classifier"]["threshold"].as_f64().unwrap();
    for (name, key) in [("n.json", "n"), ("t.json", "t")] {
        let mut m = bundle[key].clone();
        m["type"] = "tree_ensemble".into();
        std::fs::write(dir.path().join(name), m.to_string()).unwrap();
    }
    let bad = rows(&p.data).into_iter().rev().find(|r| &r[6] == "1").unwrap();
    let instance = serde_json::json!({
        "timestamp": &bad[0], "P": bad[1].parse::<f64>().unwrap(), "TN": bad[2].parse::<f64>().unwrap(),
        "TT": bad[3].parse::<f64>().unwrap(), "TA": bad[4].parse::<f64>().unwrap(), "WS": bad[5].parse::<f64>().unwrap(),
    });
    let inst = dir.path().join("row.json");
    std::fs::write(&inst, instance.to_string()).unwrap();
    let lp = dir.path().join("p.lp");
    let out = windcf(&[
        "explain",
        "--model",
        s(&p.model),
        "--n",
        s(&dir.path().join("n.json")),
        "--t",
        s(&dir.path().join("t.json")),
        "--instance",
        s(&inst),
        "--mode",
        "manufacturer",
        "--mdt",
        "30",
        "--beta",
        "0.1",
        "--dump-lp",
        s(&lp),
        "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["result"]["mode"], "manufacturer");
    if v["result"]["counterfactual"].is_object() {
        assert!(v["result"]["score"].as_f64().unwrap() < threshold);
    }
    assert!(std::fs::read_to_string(&lp).unwrap().starts_with("Minimize"));
}

#[test]
fn simulate_writes_consistent_reports() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("may");
    let out = windcf(&[
        "simulate",
        "--data",
        s(&p.data),
        "--model",
        s(&p.model),
        "--from",
        "2021-03-01",
        "--to",
        "2021-03-31",
        "--mode",
        "revenue",
        "--price",
        "100",
        "--out",
        s(&out_dir),
        "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary, on_disk);
    assert_eq!(summary["replayed"], 31 * 144);

    // Recount from the timeline file.
    let timeline = rows(&out_dir.join("timeline.csv"));
    let count = |st: &[&str]| timeline.iter().filter(|r| st.contains(&&r[5])).count();
    let c = &summary["counts"];
    assert_eq!(c["already_good"], count(&["already_good"]));
    assert_eq!(c["optimized"], count(&["optimal", "at_limit"]));
    assert_eq!(c["infeasible"], count(&["infeasible"]));
    for r in &timeline {
        if &r[5] == "infeasible" {
            assert_eq!(r[2].parse::<f64>().unwrap(), 0.0);
        }
    }
    let r = &summary["revenue_eur"];
    assert!(r["revenue_driven"].as_f64() >= r["counterfactual"].as_f64());
    assert!(r["counterfactual"].as_f64() >= r["shutdown"].as_f64());

    let out = windcf(&["report", "--dir", s(&out_dir), "--json"]);
    assert!(out.status.success());
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap(), summary);

    // A tampered summary no longer matches its timeline.
    let tampered =
        std::fs::read_to_string(out_dir.join("summary.json")).unwrap().replace("\"price\": 100.0", "\"price\": 101.0");
    std::fs::write(out_dir.join("summary.json"), tampered).unwrap();
    assert_eq!(windcf(&["report", "--dir", s(&out_dir)]).status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let config = serde_json::json!({ "data": p.data, "model": p.model, "mode": "manufacturer", "price": 50.0 });
    std::fs::write(&cfg, config.to_string()).unwrap();
    let out_dir = dir.path().join("o");
    let out = windcf(&[
        "--config",
        s(&cfg),
        "simulate",
        "--from",
        "2021-03-10",
        "--to",
        "2021-03-10T12:00:00",
        "--mode",
        "operator",
        "--out",
        s(&out_dir),
        "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mode"], "operator");
    assert_eq!(v["price"], 50.0);
    assert_eq!(v["slots"], 72);

    std::fs::write(&cfg, r#"{"unknown_key": 1}"#).unwrap();
    let out = windcf(&["--config", s(&cfg), "report", "--dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
}
