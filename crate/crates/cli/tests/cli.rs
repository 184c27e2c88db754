use std::path::Path;
use std::process::{Command, Output};

use proxcurate::selection::SelectionManifest;
use proxcurate::store::{write_store, FeatureRecord};
use proxcurate::ScoreTable;
use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proxcurate"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

/// Target and pool of the submode benchmark: small enough to run quickly.
fn small_pipeline(dir: &Path) {
    ok(
        dir,
        &[
            "synth",
            "--preset",
            "submode",
            "--part",
            "target",
            "--out",
            "target.fst",
        ],
    );
    ok(
        dir,
        &[
            "synth", "--preset", "submode", "--part", "pool", "--out", "pool.fst",
        ],
    );
    ok(
        dir,
        &[
            "train",
            "--target",
            "target.fst",
            "--pool",
            "pool.fst",
            "--out",
            "est.json",
        ],
    );
    ok(
        dir,
        &[
            "score",
            "--method",
            "learned",
            "--est",
            "est.json",
            "--pool",
            "pool.fst",
            "--out",
            "scores.jsonl",
        ],
    );
    ok(
        dir,
        &[
            "select",
            "--scores",
            "scores.jsonl",
            "--k",
            "1000",
            "--out",
            "manifest.jsonl",
        ],
    );
}

#[test]
fn standard_pipeline_recovers_planted_points() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "--seed", "3", "synth", "--preset", "standard", "--part", "target", "--out", "t.fst",
        ],
    );
    ok(
        d,
        &[
            "--seed", "3", "synth", "--preset", "standard", "--part", "pool", "--out", "p.fst",
        ],
    );
    ok(
        d,
        &[
            "train", "--target", "t.fst", "--pool", "p.fst", "--out", "est.json",
        ],
    );
    ok(
        d,
        &[
            "score", "--est", "est.json", "--pool", "p.fst", "--out", "s.jsonl",
        ],
    );
    ok(
        d,
        &[
            "select", "--scores", "s.jsonl", "--k", "2000", "--out", "m.jsonl",
        ],
    );
    let report = json(&ok(
        d,
        &[
            "report",
            "--kind",
            "recovery",
            "--manifest",
            "m.jsonl",
            "--truth",
            "p.truth.jsonl",
        ],
    ));
    assert_eq!(report["kind"], "recovery");
    assert!(
        report["report"]["precision_at_k"].as_f64().unwrap() >= 0.95,
        "{report}"
    );
    assert_eq!(report["config"]["command"], "report");
}

#[test]
fn select_zero_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d);
    ok(
        d,
        &[
            "select",
            "--scores",
            "scores.jsonl",
            "--k",
            "0",
            "--out",
            "empty.jsonl",
        ],
    );
    let m = SelectionManifest::read_jsonl(&d.join("empty.jsonl")).unwrap();
    assert!(m.is_empty());
    assert_eq!(m.k_requested, 0);
    assert_eq!(m.pool_size, 9000);
    assert_eq!(m.config["k"], 0);
}

#[test]
fn mismatched_dimensions_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d);
    ok(
        d,
        &[
            "synth", "--preset", "standard", "--part", "target", "--out", "wide.fst",
        ],
    );
    let out = run(
        d,
        &[
            "score", "--est", "est.json", "--pool", "wide.fst", "--out", "x.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension mismatch"));
    assert!(!d.join("x.jsonl").exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(dir.path(), &["select", "--k", "3"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["score", "--method", "magic"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["validate", "--store", "nope.fst"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.fst"));
}

#[test]
fn help_documents_reference_settings() {
    let dir = tempfile::tempdir().unwrap();
    let top = ok(dir.path(), &["--help"]);
    assert!(top.contains("1,200,000"));
    assert!(top.contains("0.90"));
    assert!(ok(dir.path(), &["select", "--help"]).contains("1,200,000"));
    assert!(ok(dir.path(), &["train", "--help"]).contains("0.90"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d);
    std::fs::write(
        d.join("c.json"),
        r#"{"k": 5, "scores": "scores.jsonl", "out": "c.jsonl", "seed": 9}"#,
    )
    .unwrap();
    ok(d, &["--config", "c.json", "select"]);
    let m = SelectionManifest::read_jsonl(&d.join("c.jsonl")).unwrap();
    assert_eq!((m.len(), m.config["seed"].as_u64()), (5, Some(9)));
    ok(
        d,
        &["select", "--config", "c.json", "--k", "3", "--seed", "1"],
    );
    let m = SelectionManifest::read_jsonl(&d.join("c.jsonl")).unwrap();
    assert_eq!((m.len(), m.config["seed"].as_u64()), (3, Some(1)));
    assert!(m.config.get("threads").is_none());
    assert!(m.config.get("config").is_none());

    std::fs::write(d.join("bad.json"), "[1, 2]").unwrap();
    assert_eq!(
        run(d, &["--config", "bad.json", "select"]).status.code(),
        Some(1)
    );
}

#[test]
fn artifacts_record_their_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d);
    let scores = ScoreTable::read_jsonl(&d.join("scores.jsonl")).unwrap();
    assert_eq!(scores.config["method"], "learned");
    assert_eq!(scores.config["est"], "est.json");
    let est = json(&std::fs::read_to_string(d.join("est.json")).unwrap());
    assert_eq!(est["train_config"]["early_stop_accuracy"], 0.9);
    assert!(est["history"]["steps_run"].as_u64().unwrap() > 0);
    let m = SelectionManifest::read_jsonl(&d.join("manifest.jsonl")).unwrap();
    assert_eq!(m.config["scores"], "scores.jsonl");

    let mmd = json(&ok(
        d,
        &["mmd", "--store", "pool.fst", "--store", "target.fst"],
    ));
    assert_eq!(mmd["labels"].as_array().unwrap().len(), 9);
    assert_eq!(mmd["config"]["estimator_kind"], "biased_v_statistic");
    assert_eq!(mmd["config"]["subsample_cap"], 2000);
    let leftovers: Vec<_> = std::fs::read_dir(d)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn reports_and_diversity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d);
    let comp = json(&ok(
        d,
        &[
            "report",
            "--kind",
            "composition",
            "--manifest",
            "manifest.jsonl",
        ],
    ));
    let total: f64 = comp["report"]["datasets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["percentage"].as_f64().unwrap())
        .sum();
    assert!((total - 100.0).abs() < 1e-6);

    let hist = json(&ok(
        d,
        &[
            "report",
            "--kind",
            "histogram",
            "--scores",
            "scores.jsonl",
            "--bins",
            "10",
            "--by-dataset",
        ],
    ));
    assert_eq!(hist["report"]["counts"].as_array().unwrap().len(), 10);
    assert!(hist["report"]["by_dataset"]["planted0"].is_array());

    ok(
        d,
        &[
            "report",
            "--kind",
            "shift",
            "--scores",
            "scores.jsonl",
            "--manifest",
            "manifest.jsonl",
            "--out",
            "shift.json",
        ],
    );
    let shift = json(&std::fs::read_to_string(d.join("shift.json")).unwrap());
    assert!(
        shift["report"]["selected"]["mean"].as_f64() > shift["report"]["pool"]["mean"].as_f64()
    );

    let out = run(
        d,
        &["report", "--kind", "shift", "--scores", "scores.jsonl"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--manifest"));

    let div = json(&ok(
        d,
        &[
            "diversity",
            "--store",
            "pool.fst",
            "--manifest",
            "manifest.jsonl",
        ],
    ));
    assert!(div["diversity"].as_f64().unwrap() >= 1.0);
    assert_eq!(div["count"], 1000);
}

#[test]
fn ingest_validate_and_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dump = [
        r#"{"id": 1, "dataset": "a", "vector": [0, 0], "aux": {"logprob_sum_target": -2.0, "logprob_sum_base": -1.0, "token_count": 2}}"#,
        r#"{"id": 2, "dataset": "b", "vector": [3, 4], "aux": {"logprob_sum_target": -1.0, "logprob_sum_base": -3.0, "token_count": 2}}"#,
    ]
    .join("\n");
    std::fs::write(d.join("dump.jsonl"), dump).unwrap();
    let summary = json(&ok(
        d,
        &["ingest", "--input", "dump.jsonl", "--out", "s.fst"],
    ));
    assert_eq!(summary["count"], 2);
    let report = json(&ok(d, &["validate", "--store", "s.fst"]));
    assert_eq!(report["ok"], true);

    std::fs::write(
        d.join("t.jsonl"),
        r#"{"id": 9, "dataset": "t", "vector": [0, 0]}"#,
    )
    .unwrap();
    ok(d, &["ingest", "--input", "t.jsonl", "--out", "t.fst"]);
    ok(
        d,
        &[
            "score",
            "--method",
            "avgdist",
            "--pool",
            "s.fst",
            "--target",
            "t.fst",
            "--out",
            "avg.jsonl",
        ],
    );
    let avg = ScoreTable::read_jsonl(&d.join("avg.jsonl")).unwrap();
    assert_eq!(avg.values().collect::<Vec<_>>(), vec![0.0, 5.0]);

    ok(
        d,
        &[
            "score",
            "--method",
            "ppl",
            "--pool",
            "s.fst",
            "--out",
            "ppl.jsonl",
        ],
    );
    let ppl = ScoreTable::read_jsonl(&d.join("ppl.jsonl")).unwrap();
    let want = [1f64.exp(), 0.5f64.exp()];
    for (got, want) in ppl.values().zip(want) {
        assert!((got - want).abs() < 1e-6);
    }
    ok(
        d,
        &[
            "score",
            "--method",
            "dppl",
            "--pool",
            "s.fst",
            "--out",
            "dppl.jsonl",
        ],
    );
    ok(
        d,
        &[
            "select",
            "--scores",
            "dppl.jsonl",
            "--k",
            "1",
            "--out",
            "m.jsonl",
        ],
    );
    let m = SelectionManifest::read_jsonl(&d.join("m.jsonl")).unwrap();
    assert_eq!(m.ids().collect::<Vec<_>>(), vec![2]);

    let out = run(
        d,
        &[
            "score", "--method", "ppl", "--pool", "t.fst", "--out", "x.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let out = run(
        d,
        &[
            "score", "--method", "avgdist", "--pool", "s.fst", "--out", "x.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validate_flags_non_finite_vectors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.fst");
    write_store(&path, 2, &[], &[FeatureRecord::new(4, "a", vec![1.0, 2.0])]).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[36..40].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    let out = run(dir.path(), &["validate", "--store", "n.fst"]);
    assert_eq!(out.status.code(), Some(1));
    let report = json(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(report["ok"], false);
}

#[test]
fn synth_from_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = r#"{"dim": 2, "seed": 4, "components": [
        {"mean": [0, 0], "std": 1, "count": 100, "dataset": "x", "aligned": true},
        {"mean": [5, 5], "std": 1, "count": 100, "dataset": "y"}]}"#;
    std::fs::write(d.join("spec.json"), spec).unwrap();
    let out = json(&ok(d, &["synth", "--spec", "spec.json", "--out", "m.fst"]));
    assert_eq!(
        (out["count"].as_u64(), out["dim"].as_u64()),
        (Some(200), Some(2))
    );
    let truth = std::fs::read_to_string(d.join("m.truth.jsonl")).unwrap();
    assert_eq!(
        truth.lines().next().unwrap(),
        r#"{"id":0,"aligned":true,"component":0}"#
    );

    std::fs::write(
        d.join("zero.json"),
        spec.replacen("\"std\": 1", "\"std\": 0", 1),
    )
    .unwrap();
    assert_eq!(
        run(d, &["synth", "--spec", "zero.json", "--out", "z.fst"])
            .status
            .code(),
        Some(1)
    );
}
