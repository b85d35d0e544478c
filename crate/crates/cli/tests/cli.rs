use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use assist_cli::{run, Outcome};
use assist_core::advisor::{AdvisorBundle, Demonstration};
use assist_core::nnet::LabeledDataset;
use assist_core::orchestrator::{export_training_data, ExportOptions};
use assist_core::vectorcore::Schema;
use serde_json::Value;

fn cli(args: &[&str]) -> Outcome {
    run(std::iter::once("assist").chain(args.iter().copied()))
}

fn ok(args: &[&str]) -> Outcome {
    let out = cli(args);
    assert_eq!(out.code, 0, "{args:?} failed: {}", out.stderr);
    out
}

fn structured(args: &[&str]) -> Value {
    let mut full = args.to_vec();
    full.extend(["--report", "structured"]);
    serde_json::from_str(&ok(&full).stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic corpora and a trained bundle, built once for the whole file.
struct Fixture {
    _dir: tempfile::TempDir,
    train: PathBuf,
    test: PathBuf,
    bundle: PathBuf,
    train_report: Value,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train");
        let test = dir.path().join("test");
        let bundle = dir.path().join("bundle");
        ok(&["simulate", "--mode", "collect", "--sessions", "40", "--seed", "3", "--out", s(&train)]);
        ok(&["simulate", "--mode", "collect", "--sessions", "8", "--seed", "4", "--out", s(&test)]);
        ok(&["train-tagger", "--data", s(&train), "--out", s(&bundle), "--seed", "5"]);
        let train_report = structured(&[
            "train-advisor",
            "--data",
            s(&train),
            "--out",
            s(&bundle),
            "--seed",
            "5",
            "--ensemble-size",
            "7",
        ]);
        Fixture {
            _dir: dir,
            train,
            test,
            bundle,
            train_report,
        }
    })
}

#[test]
fn simulate_is_deterministic() {
    let args = ["simulate", "--sessions", "50", "--clients", "3", "--seed", "7"];
    let first = ok(&args);
    let second = ok(&args);
    assert_eq!(first.stdout, second.stdout);
    assert!(first.stdout.contains("follows_advice"));
    assert!(first.stdout.contains("seed: 7"));
}

#[test]
fn collect_simulation_writes_logs_and_ingest_counts_them() {
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("logs");
    let out = dir.path().join("corpus");
    ok(&["simulate", "--mode", "collect", "--sessions", "4", "--clients", "2", "--seed", "1", "--out", s(&logs)]);
    assert_eq!(std::fs::read_dir(&logs).unwrap().count(), 4);
    let r = structured(&["ingest", "--data", s(&logs), "--out", s(&out)]);
    assert_eq!(r["results"]["export"]["sessions_used"], 4);
    assert!(r["results"]["corpus_rows"].as_u64().unwrap() > 0);
    assert!(out.join("tag_corpus.jsonl").is_file());
    assert_eq!(std::fs::read_dir(out.join("episodes")).unwrap().count(), 4);
    assert_eq!(r["inputs"]["data"].as_str().unwrap().len(), 64);
    assert_eq!(r["seed"], 0);
}

#[test]
fn training_reuses_the_bundle_schema() {
    let f = fixture();
    assert_eq!(f.train_report["results"]["schema_reused"], true);
    for file in ["schema.json", "tagger.json", "advisor.json", "manifest.json"] {
        assert!(f.bundle.join(file).is_file(), "missing {file}");
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(f.bundle.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["advisor.json"]["seed"], 5);
    assert_eq!(manifest["tagger.json"]["data"], f.train_report["inputs"]["data"]);
}

#[test]
fn eval_on_holdout_reports_the_member_comparison() {
    let f = fixture();
    let out = ok(&["eval", "--bundle", s(&f.bundle)]);
    assert!(out.stdout.contains("vs best member"), "{}", out.stdout);
    assert!(out.stdout.contains("ensemble >= best member - 0.02"));
    let r = structured(&["eval", "--bundle", s(&f.bundle)]);
    let advisor = r["results"]["advisor"].as_object().unwrap();
    assert!(!advisor.is_empty());
    // Holdout numbers agree with what training reported.
    for (ty, line) in advisor {
        assert_eq!(line, &f.train_report["results"]["types"][ty]["holdout"]);
    }
}

/// Encoded features and class targets of the demonstrations whose advice set
/// the ensemble knows.
fn encode_seen(demos: &[Demonstration], schema: &Schema, ensemble: &assist_core::Ensemble) -> (Vec<Vec<f64>>, Vec<usize>) {
    let empty = Vec::new();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for d in demos {
        let set = d.targets.get(&ensemble.advice_type).unwrap_or(&empty);
        if let Some(c) = ensemble.classes.index_of(set) {
            rows.push(schema.encode::<f64>(&d.vector).unwrap().features);
            targets.push(c);
        }
    }
    (rows, targets)
}

#[test]
fn eval_on_test_logs_passes_through_evaluate_top_k() {
    let f = fixture();
    let r = structured(&["eval", "--bundle", s(&f.bundle), "--test", s(&f.test)]);
    let bundle = AdvisorBundle::load(&f.bundle.join("advisor.json")).unwrap();
    let export = export_training_data(&f.test, ExportOptions::default()).unwrap();
    let demos = export.demonstrations(&bundle.schema, &bundle.catalog).unwrap();
    for (ty, e) in &bundle.ensembles {
        let (rows, targets) = encode_seen(&demos, &bundle.schema, e);
        let seen = rows.len();
        let data = LabeledDataset::new(rows, targets, e.classes.len()).unwrap();
        let expected = e.evaluate_top_k(&data, 2).unwrap() * seen as f64 / demos.len() as f64;
        let line = &r["results"]["advisor"][ty.to_string()];
        assert_eq!(line["rows"], demos.len());
        let got = line["ensemble_top2"].as_f64().unwrap();
        assert!((got - expected).abs() < 1e-12, "{ty}: {got} vs {expected}");
    }
    let f1 = r["results"]["tagger"]["f1"]["f1"].as_f64().unwrap();
    assert!(f1 > 0.5, "tagger F1 {f1}");
}

#[test]
fn eval_runs_the_data_growth_comparison() {
    let f = fixture();
    let r = structured(&[
        "eval",
        "--bundle",
        s(&f.bundle),
        "--test",
        s(&f.test),
        "--data",
        s(&f.train),
        "--seed",
        "9",
    ]);
    let g = &r["results"]["data_growth"];
    assert!(g["report"]["train_rows"].as_u64().unwrap() > 0);
    assert_eq!(r["seed"], 9);
    assert!(r["inputs"].get("data").is_some() && r["inputs"].get("test").is_some());
}

#[test]
fn bad_arguments_exit_2_with_json_errors() {
    for args in [
        vec!["frobnicate"],
        vec!["simulate", "--sessions", "3"],
        vec!["simulate", "--seed", "1", "--report", "xml"],
        vec!["eval", "--bundle", "/definitely/missing"],
        vec!["train-advisor", "--data", "/definitely/missing", "--out", "/tmp/x", "--seed", "1"],
        vec!["train-advisor", "--data", ".", "--out", "/tmp/x", "--seed", "1", "--thresholds", "0.4"],
    ] {
        let out = cli(&args);
        assert_eq!(out.code, 2, "{args:?}: {}", out.stderr);
        let err: Value = serde_json::from_str(out.stderr.trim()).unwrap();
        assert_eq!(err["error"], "bad_args");
        assert!(out.stdout.is_empty());
    }
    let help = cli(&["--help"]);
    assert_eq!(help.code, 0);
    assert!(help.stdout.contains("train-advisor"));
}

#[test]
fn failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    // A directory without logs is a data failure, not a usage error.
    let out = cli(&["train-tagger", "--data", s(dir.path()), "--out", s(&dir.path().join("b")), "--seed", "1"]);
    assert_eq!(out.code, 1);
    let err: Value = serde_json::from_str(out.stderr.trim()).unwrap();
    assert_eq!(err["error"], "data");
}
