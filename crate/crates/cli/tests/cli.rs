use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn pkforecast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pkforecast")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = pkforecast(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path, prefix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| f.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    v.sort();
    v
}

fn simulate(tmp: &TempDir, patients: usize, days: usize, mode: &str) -> PathBuf {
    let cfg = tmp.path().join("synth.json");
    fs::write(&cfg, format!(r#"{{"n_patients": {patients}, "days": {days}, "seed": 3, "mode": "{mode}"}}"#)).unwrap();
    let out = tmp.path().join("data");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&out)]);
    out
}

/// A fast configuration: short windows, a tiny network and a few steps.
fn tiny_train_config(tmp: &TempDir, architecture: &str) -> PathBuf {
    let cfg = tmp.path().join(format!("train_{architecture}.json"));
    let text = format!(
        r#"{{"training_steps": 6, "eval_every": 3, "batch_size": 2, "val_stride": 8,
            "model": {{"architecture": "{architecture}", "input_len": 24, "horizon": 6, "hidden": [8],
                       "blocks": [{{"pooling_kernel": 4, "forecast_dim": 2}}, {{"pooling_kernel": 1, "forecast_dim": 6}}]}}}}"#
    );
    fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn simulate_two_patients_two_days() {
    let tmp = TempDir::new().unwrap();
    let data = simulate(&tmp, 2, 2, "minimal_model");
    let csvs = files(&data, "");
    let csvs: Vec<_> = csvs.into_iter().filter(|f| f.extension().is_some_and(|e| e == "csv")).collect();
    assert_eq!(csvs.len(), 2);
    for f in &csvs {
        assert_eq!(fs::read_to_string(f).unwrap().lines().count(), 1 + 576);
    }
    assert!(data.join("manifest.json").is_file());

    let again = tmp.path().join("again");
    ok(&["simulate", "--config", p(&tmp.path().join("synth.json")), "--out", p(&again)]);
    for f in &csvs {
        assert_eq!(fs::read(f).unwrap(), fs::read(again.join(f.file_name().unwrap())).unwrap());
    }
}

#[test]
fn missing_config_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = pkforecast(&["simulate", "--config", p(&tmp.path().join("nope.json")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn bad_config_and_usage_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"n_patients": 0, "days": 2, "seed": 1}"#).unwrap();
    assert_eq!(pkforecast(&["simulate", "--config", p(&cfg), "--out", p(tmp.path())]).status.code(), Some(2));
    assert_eq!(pkforecast(&["train", "--features", "bogus"]).status.code(), Some(2));
}

#[test]
fn eight_trials_give_eight_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let data = simulate(&tmp, 2, 2, "encoder_oracle");
    let cfg = tiny_train_config(&tmp, "nhits");
    let out = tmp.path().join("run");
    ok(&[
        "train", "--data", p(&data), "--features", "pk", "--mode", "global", "--config", p(&cfg), "--trials", "8",
        "--test-steps", "100", "--out", p(&out),
    ]);
    let cks = out.join("checkpoints");
    assert_eq!(files(&cks, "trial").len(), 8);
    assert_eq!(files(&cks, "pk_trial").len(), 8);
    assert_eq!(files(&out.join("logs"), "trial").len(), 8);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 8);
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);

    let k = tmp.path().join("k");
    ok(&["inspect-k", "--checkpoints", p(&out), "--out", p(&k)]);
    let table = fs::read_to_string(k.join("reports/k_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 16);
    let test: serde_json::Value = serde_json::from_str(&fs::read_to_string(k.join("reports/k_test.json")).unwrap()).unwrap();
    assert!(test["test"]["p_value"].as_f64().is_some());
}

#[test]
fn local_mode_gives_one_checkpoint_per_trial_and_patient() {
    let tmp = TempDir::new().unwrap();
    let data = simulate(&tmp, 3, 2, "minimal_model");
    let cfg = tiny_train_config(&tmp, "mlp");
    let out = tmp.path().join("run");
    ok(&[
        "train", "--data", p(&data), "--features", "sparse", "--mode", "local", "--config", p(&cfg), "--trials", "2",
        "--test-steps", "100", "--out", p(&out),
    ]);
    assert_eq!(files(&out.join("checkpoints"), "trial").len(), 6);

    let eval = tmp.path().join("eval");
    ok(&["evaluate", "--data", p(&data), "--checkpoints", p(&out), "--out", p(&eval)]);
    let csv = fs::read_to_string(eval.join("reports/eval.csv")).unwrap();
    assert!(csv.starts_with("patient,mode,metric,subset,trial_mean,trial_sd"));
    assert!(csv.lines().any(|l| l.starts_with("all,")));
}

#[test]
fn insufficient_data_names_the_patient() {
    let tmp = TempDir::new().unwrap();
    let data = simulate(&tmp, 2, 1, "minimal_model");
    let cfg = tiny_train_config(&tmp, "mlp");
    let out = pkforecast(&[
        "train", "--data", p(&data), "--features", "sparse", "--mode", "local", "--config", p(&cfg), "--test-steps", "270",
        "--out", p(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth000"));
}

fn constant_record(dir: &Path, name: &str, n: usize, bolus_at: Option<usize>) {
    fs::create_dir_all(dir).unwrap();
    let mut text = String::from("timestamp,glucose,cho,bolus,basal,observed\n");
    for i in 0..n {
        let bolus = if Some(i) == bolus_at { 2.0 } else { 0.0 };
        text.push_str(&format!("{},140,0,{bolus},0,1\n", i * 5));
    }
    fs::write(dir.join(format!("{name}.csv")), text).unwrap();
}

#[test]
fn persistence_on_constant_glucose_scores_zero() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("flat");
    constant_record(&data, "a", 200, None);
    constant_record(&data, "b", 200, None);
    let cfg = tiny_train_config(&tmp, "persistence");
    let run = tmp.path().join("run");
    ok(&[
        "train", "--data", p(&data), "--features", "univariate", "--config", p(&cfg), "--trials", "2", "--test-steps",
        "60", "--out", p(&run),
    ]);
    let e1 = tmp.path().join("e1");
    let e2 = tmp.path().join("e2");
    ok(&["evaluate", "--data", p(&data), "--checkpoints", p(&run), "--out", p(&e1)]);
    ok(&["evaluate", "--data", p(&data), "--checkpoints", p(&run.join("checkpoints")), "--test-steps", "60", "--out", p(&e2)]);
    let r1 = fs::read(e1.join("reports/eval.json")).unwrap();
    assert_eq!(r1, fs::read(e2.join("reports/eval.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert!(!cells.is_empty());
    for c in cells {
        assert_eq!(c["trial_mean"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn counterfactual_columns() {
    let tmp = TempDir::new().unwrap();
    let data = simulate(&tmp, 2, 2, "minimal_model");
    let cfg = tiny_train_config(&tmp, "nhits");
    let run = tmp.path().join("run");
    ok(&[
        "train", "--data", p(&data), "--features", "pk", "--config", p(&cfg), "--test-steps", "100", "--out", p(&run),
    ]);
    let ck = run.join("checkpoints/trial00.json");
    let cf = tmp.path().join("cf");
    ok(&["counterfactual", "--checkpoint", p(&ck), "--data", p(&data), "--scale", "1", "--test-steps", "100", "--out", p(&cf)]);
    let tables = files(&cf.join("reports"), "counterfactual_synth");
    assert_eq!(tables.len(), 2);
    let text = fs::read_to_string(&tables[0]).unwrap();
    assert!(text.starts_with("origin_timestamp,original,zeroed,scaled"));
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 100 - 6 + 1);
    assert!(rows.iter().all(|r| r[1] == r[3]));

    let sparse = tmp.path().join("sparse");
    ok(&["train", "--data", p(&data), "--features", "sparse", "--config", p(&cfg), "--test-steps", "100", "--out", p(&sparse)]);
    let out = pkforecast(&[
        "counterfactual", "--checkpoint", p(&sparse.join("checkpoints/trial00.json")), "--data", p(&data), "--out",
        p(&tmp.path().join("cf2")),
    ]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn counterfactual_without_boluses_is_flat() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("flat");
    constant_record(&data, "a", 150, Some(10));
    constant_record(&data, "b", 150, Some(20));
    let cfg = tiny_train_config(&tmp, "nhits");
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--features", "pk", "--config", p(&cfg), "--test-steps", "40", "--out", p(&run)]);
    let nobolus = tmp.path().join("nobolus");
    constant_record(&nobolus, "a", 150, None);
    constant_record(&nobolus, "b", 150, None);
    let cf = tmp.path().join("cf");
    ok(&["counterfactual", "--checkpoint", p(&run.join("checkpoints/trial00.json")), "--data", p(&nobolus), "--out", p(&cf)]);
    let text = fs::read_to_string(cf.join("reports/counterfactual_a.csv")).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert!(cols[1] == cols[2] && cols[2] == cols[3], "{line}");
    }
}

#[test]
fn inspect_k_needs_variance() {
    let tmp = TempDir::new().unwrap();
    let data = simulate(&tmp, 3, 2, "encoder_oracle");
    // Zero learning rate on k keeps k_bolus == k_basal at the shared initial value.
    let cfg = tmp.path().join("frozen.json");
    fs::write(
        &cfg,
        r#"{"training_steps": 2, "eval_every": 1, "k_learning_rate": 0.0, "val_stride": 8,
            "model": {"architecture": "mlp", "input_len": 24, "hidden": [4]}}"#,
    )
    .unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--features", "pk", "--config", p(&cfg), "--test-steps", "100", "--out", p(&run)]);
    let out = pkforecast(&["inspect-k", "--checkpoints", p(&run), "--out", p(&tmp.path().join("k"))]);
    assert_eq!(out.status.code(), Some(1));

    let cfg = tiny_train_config(&tmp, "nhits");
    let run = tmp.path().join("run2");
    ok(&["train", "--data", p(&data), "--features", "pk", "--config", p(&cfg), "--test-steps", "100", "--out", p(&run)]);
    let k = tmp.path().join("k2");
    ok(&["inspect-k", "--checkpoints", p(&run), "--out", p(&k)]);
    assert_eq!(fs::read_to_string(k.join("reports/k_table.csv")).unwrap().lines().count(), 1 + 3);
}

#[test]
fn ingest_aligns_events() {
    let tmp = TempDir::new().unwrap();
    let events = tmp.path().join("events");
    fs::create_dir_all(&events).unwrap();
    fs::write(
        events.join("559.csv"),
        "timestamp,kind,value,end_timestamp\n0,glucose,120,\n10,glucose,130,\n12,bolus_normal,3.5,\n20,cho,45,\n0,basal_rate,1.2,\n30,glucose,125,\n",
    )
    .unwrap();
    let out = tmp.path().join("aligned");
    ok(&["ingest", "--events", p(&events), "--out", p(&out)]);
    let text = fs::read_to_string(out.join("559.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "timestamp,glucose,cho,bolus,basal,observed");
    assert_eq!(lines.len(), 1 + 7);
    assert_eq!(lines[2], "5,120.0,0.0,0.0,0.0,0");
    assert!(out.join("manifest.json").is_file());
}
