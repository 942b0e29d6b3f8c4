//! Runs the `relqa` binary against the fixture corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn relqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relqa"))
        .args(args)
        .env_remove("RELQA_LISTEN")
        .output()
        .expect("spawn relqa")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

const SUBCOMMANDS: [(&str, &[&str]); 9] = [
    ("ingest", &["--config", "--out", "--seed"]),
    ("gen-dataset", &["--config", "--out", "--seed", "--mock-script", "--render"]),
    ("gen-bench", &["--config", "--out", "--seed", "--mock-script"]),
    ("classify", &["--config", "--out", "--seed", "--mock-script", "--pool"]),
    (
        "review-serve",
        &["--config", "--out", "--seed", "--pool", "--images-root", "--listen", "--cors-origin"],
    ),
    ("finalize", &["--config", "--out", "--seed", "--pool", "--n-per-subset", "--n-positive"]),
    (
        "collect",
        &["--config", "--out", "--seed", "--mock-script", "--benchmark", "--responses"],
    ),
    (
        "eval",
        &["--benchmark", "--responses", "--external", "--format", "--model", "--config", "--output", "--json"],
    ),
    ("report", &["--format", "--config", "--output"]),
];

#[test]
fn help_documents_every_flag() {
    for (sub, flags) in SUBCOMMANDS {
        let out = relqa(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
        let help = String::from_utf8(out.stdout).unwrap();
        for flag in flags {
            let line = help
                .lines()
                .find(|l| l.trim_start().starts_with(flag) || l.contains(&format!(", {flag}")))
                .unwrap_or_else(|| panic!("{sub} --help does not list {flag}:\n{help}"));
            let rest = line.trim_start()[flag.len()..].trim_start();
            let rest = match rest.strip_prefix('<') {
                Some(r) => r.split_once('>').map_or("", |(_, tail)| tail),
                None => rest,
            };
            let described = rest.chars().any(char::is_alphabetic);
            assert!(described, "{sub} {flag} has no help text: {line:?}");
        }
    }
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(fixtures().join("e2e/run.toml")).unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("frobnicate = true\n{base}")).unwrap();
    let out = relqa(&["gen-dataset", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config_error");
    assert_eq!(err["stage"], "gen-dataset");
    assert!(err["message"].as_str().unwrap().contains("frobnicate"), "{err}");
}

#[test]
fn bad_usage_exits_2() {
    let out = relqa(&["gen-dataset"]);
    assert_eq!(out.status.code(), Some(2));
    let out = relqa(&["eval", "--benchmark", "b.jsonl", "--responses", "r.jsonl", "--format", "html"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_dataset_writes_jsonl_and_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = relqa(&[
        "gen-dataset",
        "--config",
        s(&fixtures().join("e2e/run.toml")),
        "--mock-script",
        s(&fixtures().join("mock/dataset.jsonl")),
        "--out",
        s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("dataset.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 17);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["schema_version"], 1);
    }
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("runs/gen-dataset.json")).unwrap()).unwrap();
    assert_eq!(record["stage"], "gen-dataset");
    assert_eq!(record["seed"], 7);
    assert_eq!(record["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(record["counts"]["processed"], 20);
    assert_eq!(record["counts"]["exported"], 17);
    assert_eq!(std::fs::read_to_string(out_dir.join("retry-gen-dataset.jsonl")).unwrap(), "");
}

#[test]
fn seed_override_changes_the_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = relqa(&[
        "ingest",
        "--config",
        s(&fixtures().join("e2e/run.toml")),
        "--out",
        s(&out_dir),
        "--seed",
        "99",
    ]);
    assert!(out.status.success());
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("runs/ingest.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 99);
    assert_eq!(record["counts"]["relations"], 20);
    assert!(out_dir.join("corpus/manifest.toml").is_file());
}

fn write(path: &Path, lines: &[String]) {
    std::fs::write(path, lines.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
}

#[test]
fn eval_prints_a_table_row() {
    let dir = tempfile::tempdir().unwrap();
    // 5 positives (4 yes), 5 category (2 yes), 1 attribute (no), 1 relation (yes).
    let mut items = Vec::new();
    let mut responses = Vec::new();
    let mut add = |id: String, label: &str, subset: &str, reply: &str| {
        items.push(format!(
            r#"{{"item_id":"{id}","image_id":"img","question":"Is it?","gt_label":"{label}","subset":"{subset}"}}"#
        ));
        responses.push(format!(r#"{{"item_id":"{id}","response_text":"{reply}"}}"#));
    };
    for i in 0..5 {
        add(format!("p{i}"), "yes", "positive", if i < 4 { "Yes." } else { "No." });
        add(format!("c{i}"), "no", "category", if i < 2 { "Yes, it is." } else { "No, it is not." });
    }
    add("a0".into(), "no", "attribute", "No.");
    add("r0".into(), "no", "relation", "Yes.");
    let bench = dir.path().join("b.jsonl");
    let resp = dir.path().join("r.jsonl");
    write(&bench, &items);
    write(&resp, &responses);

    let out = relqa(&["eval", "--benchmark", s(&bench), "--responses", s(&resp), "--format", "markdown", "--model", "m"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("| Model | FP_cat | FP_attr | FP_rela | F1 |"));
    assert_eq!(lines.next(), Some("|---|---|---|---|---|"));
    // P = 4/7, R = 4/5, F1 = 2/3.
    assert_eq!(lines.next(), Some("| m | 40.0 | 0.0 | 100.0 | 66.7 |"));
    assert!(table.contains("Ambiguous responses (m): 0"));
    assert!(dir.path().join("runs/eval.json").is_file());

    let json = dir.path().join("m.json");
    let csv = dir.path().join("m.csv");
    let out = relqa(&["eval", "--benchmark", s(&bench), "--responses", s(&resp), "--model", "m", "--json", s(&json)]);
    assert!(out.status.success());
    let out = relqa(&[
        "eval",
        "--benchmark",
        s(&bench),
        "--responses",
        s(&resp),
        "--model",
        "m2",
        "--format",
        "csv",
        "--output",
        s(&csv),
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let out = relqa(&["report", s(&json), s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("| m | 40.0 | 0.0 | 100.0 | 66.7 |"), "{table}");
    assert!(table.contains("| m2 | 40.0 | 0.0 | 100.0 | 66.7 |"), "{table}");
}

#[test]
fn eval_external_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("pope.jsonl");
    let resp = dir.path().join("r.jsonl");
    write(
        &bench,
        &[
            r#"{"question_id": 1, "image": "COCO_val2014_000000310196.jpg", "text": "Is there a snowboard in the image?", "label": "yes"}"#.into(),
            r#"{"question_id": 2, "image": "COCO_val2014_000000310196.jpg", "text": "Is there a dog in the image?", "label": "no"}"#.into(),
        ],
    );
    write(
        &resp,
        &[
            r#"{"item_id": "1", "response_text": "Yes, there is."}"#.into(),
            r#"{"item_id": "2", "response_text": "No."}"#.into(),
        ],
    );
    let out = relqa(&[
        "eval",
        "--external",
        "--benchmark",
        s(&bench),
        "--responses",
        s(&resp),
        "--format",
        "csv",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("model,pope,1.0,1.0,1.0,"), "{row}");
}

#[test]
fn stage_failure_exits_1_with_stage_name() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = fixtures().join("e2e/run.toml");
    let ok = relqa(&[
        "gen-bench",
        "--config",
        s(&cfg),
        "--out",
        s(&out_dir),
        "--mock-script",
        s(&fixtures().join("mock/bench.jsonl")),
    ]);
    assert!(ok.status.success());
    // Nothing reviewed yet, so nothing is kept.
    let out = relqa(&["finalize", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "stage_failure");
    assert_eq!(err["stage"], "finalize");
    assert!(err["message"].as_str().unwrap().contains("positive"), "{err}");
}

#[test]
fn exhausted_mock_script_goes_to_retry_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let script = dir.path().join("short.jsonl");
    std::fs::write(&script, "{\"reply\": \"skip\"}\n").unwrap();
    let out = relqa(&[
        "gen-dataset",
        "--config",
        s(&fixtures().join("e2e/run.toml")),
        "--out",
        s(&out_dir),
        "--mock-script",
        s(&script),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let retry = std::fs::read_to_string(out_dir.join("retry-gen-dataset.jsonl")).unwrap();
    assert_eq!(retry.lines().count(), 19);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("runs/gen-dataset.json")).unwrap()).unwrap();
    assert_eq!(record["counts"]["retry"], 19);
}
