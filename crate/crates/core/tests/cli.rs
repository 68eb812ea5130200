//! Drives the `ralbench` binary end to end on small fixture files.

use std::path::Path;
use std::process::{Command, Output};

use ralbench::corpus::{load_corpus, Corpus, Instance, TaskKind};
use ralbench::perturb::Manifest;

fn bin(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ralbench"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "ralbench {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn fixture(dir: &Path) {
    let entries = (0..30)
        .map(|i| {
            Instance::new(
                format!("c{i}"),
                TaskKind::TextClassification,
                format!("patient {i} had reaction r{i} to drug d{}", i % 4),
            )
            .with_value(if i % 2 == 0 { "True" } else { "False" })
        })
        .collect();
    let c = Corpus::from_instances("cls", TaskKind::TextClassification, entries).unwrap();
    c.save(&dir.join("train.jsonl")).unwrap();
    c.save(&dir.join("test.jsonl")).unwrap();
}

#[test]
fn ingest_and_build_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let o = bin(d, &["ingest", "--in", "train.jsonl", "--task", "text-classification", "--out", "canon.jsonl"]);
    assert!(stdout(&o).contains("30 entries"));
    assert!(d.join("canon.jsonl").is_file());

    let o = bin(
        d,
        &[
            "build-corpus", "--in", "train.jsonl", "--task", "text-classification", "--kind", "counterfactual",
            "--rate", "0.5", "--seed", "3", "--out", "cf.jsonl",
        ],
    );
    assert!(stdout(&o).contains("15 changed"), "{}", stdout(&o));
    let m = Manifest::load(&d.join("cf.jsonl.manifest.jsonl")).unwrap();
    assert_eq!(m.entries.len(), 15);

    bin(d, &["build-corpus", "--in", "train.jsonl", "--task", "text-classification", "--kind", "unlabeled", "--out", "u.jsonl"]);
    let u = load_corpus(&d.join("u.jsonl"), TaskKind::TextClassification).unwrap();
    assert!(u.entries.iter().all(|e| e.value.is_none()));
}

#[test]
fn retrieve_prints_ranked_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let o = bin(
        d,
        &["retrieve", "--corpus", "train.jsonl", "--task", "text-classification", "--query", "reaction r7", "-k", "3"],
    );
    let hits: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(hits.len(), 3);
    assert_eq!(hits[0]["id"], "c7");
    assert_eq!(hits[0]["rank"], 1);
}

#[test]
fn correct_corpus_with_oracle_judge() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    bin(
        d,
        &[
            "build-corpus", "--in", "train.jsonl", "--task", "text-classification", "--kind", "counterfactual",
            "--out", "cf.jsonl",
        ],
    );
    let params = serde_json::json!({"corpus": "train.jsonl", "task": "text-classification"}).to_string();
    let o = bin(
        d,
        &[
            "correct-corpus", "--judge", "oracle", "--judge-params", &params, "--in", "cf.jsonl", "--task",
            "text-classification", "--out", "fixed.jsonl",
        ],
    );
    assert!(stdout(&o).contains("30 revised"), "{}", stdout(&o));
    let fixed = load_corpus(&d.join("fixed.jsonl"), TaskKind::TextClassification).unwrap();
    let orig = load_corpus(&d.join("train.jsonl"), TaskKind::TextClassification).unwrap();
    assert_eq!(fixed.entries, orig.entries);
    assert!(d.join("fixed.jsonl.corrections.jsonl").is_file());
}

#[test]
fn train_selector_run_score_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let o = bin(
        d,
        &[
            "train-selector", "--corpus", "train.jsonl", "--task", "text-classification", "--provider",
            r#"{"kind":"hash","dim":16}"#, "--out", "sel.bin", "--train-config", r#"{"epochs":2}"#,
        ],
    );
    assert!(stdout(&o).contains("loss by epoch"));
    assert!(d.join("sel.bin").is_file());

    std::fs::write(
        d.join("run.toml"),
        r#"
run_id = "cli"
ask_negativity = true

[[datasets]]
name = "cls"
task = "text-classification"
train = "train.jsonl"
test = "test.jsonl"

[[corpora]]
kind = "labeled"

[[corpora]]
kind = "negative"

[[retrievers]]
name = "bm25"
kind = "bm25"

[[retrievers]]
name = "sel"
kind = "selector"
model = "sel.bin"
provider = { kind = "hash", dim = 16 }

[[backends]]
name = "echo"
kind = "mock-echo"
"#,
    )
    .unwrap();
    let o = bin(d, &["run", "--config", "run.toml"]);
    assert!(stdout(&o).contains("4 done, 0 failed"), "{}", stdout(&o));
    let again = bin(d, &["run", "--config", "run.toml", "--resume"]);
    assert!(stdout(&again).contains("0 cells executed, 4 skipped; 0 backend calls"), "{}", stdout(&again));

    let run = d.join("runs/cli");
    let report_md = std::fs::read_to_string(run.join("report.md")).unwrap();
    let o = bin(d, &["report", "--run", "runs/cli"]);
    assert_eq!(stdout(&o), report_md);
    assert!(report_md.contains("| labeled / bm25 / echo | 100.00 |"), "{report_md}");

    let o = bin(
        d,
        &[
            "score", "--records", "runs/cli/cells/cls__labeled__bm25__echo/records.jsonl", "--task",
            "text-classification", "--labels", "True,False",
        ],
    );
    let m: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(m["micro"]["f1"], 1.0);
    assert_eq!(m["records"], 30);
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "run_id = \"x\"\nbogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ralbench"))
        .current_dir(dir.path())
        .args(["run", "--config", "bad.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn shipped_configs_plan() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let demo = ralbench::runner::plan(&ralbench::runner::RunConfig::load(&root.join("demo.toml")).unwrap()).unwrap();
    assert_eq!(demo.cells.len(), 16);
    let http = ralbench::runner::plan(&ralbench::runner::RunConfig::load(&root.join("http.toml")).unwrap()).unwrap();
    assert_eq!(http.cells.len(), 2);
}
