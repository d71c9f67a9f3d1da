use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn flare(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flare"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn flare")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    assert_eq!(code(&flare(w, &["frobnicate"])), 2);
    assert_eq!(code(&flare(w, &["synth", "--out", "x.json", "--bogus"])), 2);
    assert_eq!(code(&flare(w, &["mutate-eval", "--checkpoint", "a", "--corpus", "b", "--level", "5"])), 2);
    assert_eq!(code(&flare(w, &["eval", "--checkpoint", "a", "--corpus", "b", "--critique", "loud"])), 2);
    assert_eq!(code(&flare(w, &["train", "--corpus", "c", "--out", "o", "--preset", "nope"])), 2);
    assert_eq!(code(&flare(&w.join("missing"), &["presets"])), 2);
    let help = flare(w, &["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("mutate-eval"));
}

#[test]
fn runtime_and_invariant_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let o = flare(w, &["eval", "--checkpoint", "none.ckpt", "--corpus", "none.json"]);
    assert_eq!(code(&o), 1);
    let o = flare(w, &["grad-check", "--mode", "id_only", "--tolerance", "1e-30"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = flare(dir.path(), &["grad-check", "--out", "gc.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).matches("PASS").count(), 3);
    let reports = json(&dir.path().join("gc.json"));
    for r in reports.as_array().unwrap() {
        assert!(r["report"]["max_rel_err"].as_f64().unwrap() <= 1e-4);
    }
}

#[test]
fn presets_listed() {
    let dir = tempfile::tempdir().unwrap();
    let o = flare(dir.path(), &["presets"]);
    assert_eq!(code(&o), 0);
    let names = stdout(&o);
    for n in ["office-id", "office-text_id", "desk-critique", "clothing-large"] {
        assert!(names.lines().any(|l| l == n), "{n}");
    }
}

#[test]
fn config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    std::fs::write(
        w.join("cfg.json"),
        r#"{"preset": "desk-text_id", "lr": 0.01, "total_steps": 77, "loss": {"tau": 0.5}}"#,
    )
    .unwrap();
    let o = flare(
        w,
        &["train", "--corpus", "c", "--out", "o", "--config", "cfg.json", "--steps", "9", "--print-config"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["preset"], "desk-text_id");
    assert_eq!(cfg["fusion"], "text_id");
    assert_eq!(cfg["lr"], 0.01);
    assert_eq!(cfg["total_steps"], 9);
    assert_eq!(cfg["loss"]["tau"], 0.5);
    assert_eq!(cfg["loss"]["alpha"], 0.5);

    let o = flare(
        w,
        &["train", "--corpus", "c", "--out", "o", "--preset", "desk-critique", "--ablation", "no_text", "--print-config"],
    );
    let cfg: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["fusion"], "id_only");
    assert_eq!(cfg["perceiver"], Value::Null);
}

#[test]
fn preprocess_reviews() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let mut reviews = String::new();
    for u in 0..6 {
        for t in 0..5 {
            let asin = format!("B{:02}", (u + t) % 7);
            reviews.push_str(&format!(
                "{{\"reviewerID\": \"U{u}\", \"asin\": \"{asin}\", \"unixReviewTime\": {}}}\n",
                1000 + t
            ));
        }
    }
    let meta: String = (0..7)
        .map(|i| {
            format!(
                "{{\"asin\": \"B{i:02}\", \"title\": \"Stapler {i}\", \"category\": [\"Office Products\", \"Supplies\"]}}\n"
            )
        })
        .collect();
    std::fs::create_dir(w.join("raw")).unwrap();
    std::fs::write(w.join("raw/reviews.json"), reviews).unwrap();
    std::fs::write(w.join("raw/meta.json"), meta).unwrap();
    let o = flare(
        w,
        &["preprocess", "--reviews", "raw/reviews.json", "--meta", "raw/meta.json", "--out", "data/office.json"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bundle = flare_core::data::CorpusBundle::load(&w.join("data/office.json")).unwrap();
    assert_eq!(bundle.items.len(), 7);
    assert_eq!(bundle.split.test.len(), 6);
    let manifest = json(&w.join("data/office.json.manifest.json"));
    assert_eq!(manifest["command"], "preprocess");
    assert!(manifest["inputs"]["raw/reviews.json"].is_string());
}

/// synth -> train -> eval -> mutate-eval in `w`; returns the artifacts that
/// must be reproducible.
fn pipeline(w: &Path) -> Vec<(String, Vec<u8>)> {
    let run = |args: &[&str]| {
        let o = flare(w, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["synth", "--structure", "category_driven", "--items", "480", "--users", "120", "--seed", "4", "--out", "data/c.json"]);
    run(&["train", "--corpus", "data/c.json", "--out", "runs/a", "--preset", "desk-critique", "--steps", "150", "--seed", "3"]);
    let o = run(&["eval", "--checkpoint", "runs/a/final.ckpt", "--corpus", "data/c.json", "--critique", "precise", "--out", "reports/precise.json", "--csv", "reports/precise.csv"]);
    for m in ["recall@1", "recall@5", "recall@10", "ndcg@10", "mrr", "cat_ndcg@10"] {
        assert!(stdout(&o).contains(m), "{m}");
    }
    run(&["mutate-eval", "--checkpoint", "runs/a/final.ckpt", "--corpus", "data/c.json", "--level", "3", "--seed", "1", "--out", "reports/mut3.json"]);
    [
        "data/c.json",
        "data/c.json.manifest.json",
        "runs/a/final.ckpt",
        "runs/a/config.json",
        "runs/a/manifest.json",
        "reports/precise.json",
        "reports/precise.csv",
        "reports/precise.json.manifest.json",
        "reports/mut3.json",
        "reports/mut3.json.manifest.json",
    ]
    .iter()
    .map(|p| (p.to_string(), std::fs::read(w.join(p)).unwrap()))
    .collect()
}

#[test]
fn end_to_end_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    for ((name, x), (_, y)) in ra.iter().zip(&rb) {
        assert!(x == y, "{name} differs between identical runs");
    }
    let report = json(&a.path().join("reports/precise.json"));
    assert_eq!(report["n_queries"], 120);
    assert_eq!(report["critique"]["level"], "precise");
    let manifest = json(&a.path().join("runs/a/manifest.json"));
    assert_eq!(manifest["config"]["total_steps"], 150);
    assert!(manifest["outputs"]["runs/a/final.ckpt"].is_string());
    let log = std::fs::read_to_string(a.path().join("runs/a/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 150);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["step", "l_mlm", "l_c", "l_total", "eff_batch", "wall_ms"] {
        assert!(first.get(k).is_some(), "{k}");
    }
}

#[test]
fn resolved_configs_match_published_schema() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/schemas/train_config.schema.json");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let names = stdout(&flare(dir.path(), &["presets"]));
    for preset in names.lines() {
        let o = flare(dir.path(), &["train", "--corpus", "c", "--out", "o", "--preset", preset, "--print-config"]);
        assert_eq!(code(&o), 0, "{preset}");
        let cfg: Value = serde_json::from_str(&stdout(&o)).unwrap();
        let errors: Vec<String> = validator.iter_errors(&cfg).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{preset}: {errors:?}");
    }
    assert!(!validator.is_valid(&serde_json::json!({ "lr": 0.1, "typo": 1 })));
}
