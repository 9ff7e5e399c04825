use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sta4clc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sta4clc")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SCENARIO: &str = r#"{
  "n_blocks": 40, "extent": 3000.0, "n_clusters": 2, "cluster_sd": 400.0, "n_sectors": 3,
  "weeks_per_period": 30, "total_weeks": 40,
  "disasters": [{"week": 8, "radius": 900.0}, {"week": 33, "radius": 900.0}]
}"#;

const MODEL: &str = r#"{"hidden_dim": 8, "attention_heads": 2, "gat_heads": 1, "epochs": 6, "lr": 0.02}"#;

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fs::write(root.join("scenario.json"), SCENARIO).unwrap();
    fs::write(root.join("model.json"), MODEL).unwrap();
    let data = root.join("data");
    let out = sta4clc(&["synth", "--config", p(&root.join("scenario.json")), "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["blocks.csv", "pois.csv", "weather.csv", "disasters.csv", "truth.json", "run_manifest.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let graph_dir = root.join("graph");
    let out = sta4clc(&["graph", "--data", p(&data), "--weeks", "30", "--k", "5", "--out", p(&graph_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("relations: "));

    let res_dir = root.join("res");
    let out = sta4clc(&["resilience", "--data", p(&data), "--weeks", "30", "--window", "10", "--out", p(&res_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(&res_dir.join("resilience.csv")).lines().count(), 1 + 40 * 2 * 30);

    let run = root.join("run");
    let train = |dir: &Path| {
        sta4clc(&[
            "train",
            "--data",
            p(&data),
            "--graph",
            p(&graph_dir.join("graph.json")),
            "--config",
            p(&root.join("model.json")),
            "--folds",
            "3",
            "--seed",
            "42",
            "--weeks",
            "30",
            "--out",
            p(dir),
        ])
    };
    let out = train(&run);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in
        ["config.json", "params.bin", "manifest.json", "history.csv", "metrics.json", "predictions.csv", "graph.json"]
    {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&run.join("run_manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 6);

    // identical inputs give identical primary outputs
    let again = root.join("run2");
    assert!(train(&again).status.success());
    for f in ["params.bin", "metrics.json", "predictions.csv", "history.csv"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let eval = root.join("eval");
    let out = sta4clc(&["evaluate", "--run", p(&run), "--data", p(&data), "--out", p(&eval)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&read(&eval.join("evaluation.json"))).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&read(&run.join("metrics.json"))).unwrap();
    assert_eq!(report["mean_macro_f1"], metrics["mean"]["macro_f1"]);

    // a no-op prediction repeats the validation predictions exactly
    let params_before = fs::read(run.join("params.bin")).unwrap();
    let noop = root.join("noop");
    let out = sta4clc(&["predict", "--run", p(&run), "--data", p(&data), "--out", p(&noop)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(&noop.join("predictions.csv")), read(&run.join("predictions.csv")));

    // a severe extra disaster moves at least one footprint block down
    let blocks: Vec<String> = read(&data.join("blocks.csv"))
        .lines()
        .skip(1)
        .take(8)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    let mut rows = String::from("event_id,week,block_id,severity\n");
    for b in &blocks {
        rows.push_str(&format!("X1,20,{b},3.0\n"));
    }
    fs::write(root.join("storm.csv"), rows).unwrap();
    let storm = root.join("storm");
    let out = sta4clc(&[
        "predict",
        "--run",
        p(&run),
        "--data",
        p(&data),
        "--disasters",
        p(&root.join("storm.csv")),
        "--out",
        p(&storm),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let delta = |path: &Path| -> Vec<(String, f64)> {
        read(path)
            .lines()
            .skip(1)
            .map(|l| {
                let c: Vec<&str> = l.split(',').collect();
                (c[0].to_string(), c[2].parse().unwrap())
            })
            .collect()
    };
    let before = delta(&noop.join("predictions.csv"));
    let after = delta(&storm.join("predictions.csv"));
    assert!(before.iter().zip(&after).any(|(b, a)| blocks.contains(&b.0) && a.1 < b.1));
    assert_eq!(fs::read(run.join("params.bin")).unwrap(), params_before);

    // attribute overrides: a misspelt column is a data error naming it
    fs::write(root.join("bad.csv"), format!("block_id,z_O\n{},1.0\n", blocks[0])).unwrap();
    let out = sta4clc(&[
        "predict",
        "--run",
        p(&run),
        "--data",
        p(&data),
        "--attributes",
        p(&root.join("bad.csv")),
        "--out",
        p(&root.join("bad")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("z_O"));

    fs::write(root.join("attrs.csv"), format!("block_id,period_id,z_1\n{},P1,5.0\n", blocks[0])).unwrap();
    let out = sta4clc(&[
        "predict",
        "--run",
        p(&run),
        "--data",
        p(&data),
        "--attributes",
        p(&root.join("attrs.csv")),
        "--out",
        p(&root.join("attrs")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_one() {
    let out = sta4clc(&["train", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
    assert_eq!(sta4clc(&["train", "--data", "x", "--out", "y", "--bogus"]).status.code(), Some(1));
    assert_eq!(sta4clc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sta4clc(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sta4clc(&["graph", "--data", p(&tmp.path().join("missing")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(tmp.path().join("bad.json"), r#"{"hidden_dim": 10, "attention_heads": 4}"#).unwrap();
    fs::write(tmp.path().join("scenario.json"), SCENARIO).unwrap();
    let data = tmp.path().join("data");
    assert!(sta4clc(&["synth", "--config", p(&tmp.path().join("scenario.json")), "--out", p(&data)]).status.success());
    let out = sta4clc(&[
        "train",
        "--data",
        p(&data),
        "--weeks",
        "30",
        "--config",
        p(&tmp.path().join("bad.json")),
        "--out",
        p(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    let out = Command::new(env!("CARGO_BIN_EXE_sta4clc"))
        .args(["synth", "--out", p(&tmp.path().join("x"))])
        .env("STA4CLC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
