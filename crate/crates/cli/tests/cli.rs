use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ralab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ralab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ralab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_lines(path: &Path, lines: &[Value]) {
    let text: String = lines.iter().map(|v| format!("{v}\n")).collect();
    fs::write(path, text).unwrap();
}

const CITIES: [(&str, &str, &str); 6] = [
    ("paris", "france", "seine"),
    ("rome", "italy", "tiber"),
    ("madrid", "spain", "manzanares"),
    ("berlin", "germany", "spree"),
    ("vienna", "austria", "danube"),
    ("london", "england", "thames"),
];

fn documents(year: i32) -> Vec<Value> {
    CITIES
        .iter()
        .map(|(city, country, river)| {
            json!({
                "id": format!("{city}-{year}"),
                "title": city,
                "sections": [
                    {"title": "overview", "text": format!("{city} is the capital city of {country} and a large old town on the river {river} with many bridges")},
                    {"title": "history", "text": format!("the history of {city} in {country} goes back many centuries along the banks of the {river} where markets grew")}
                ],
                "source": "wiki",
                "dump_date": format!("{year}-12-20"),
            })
        })
        .collect()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        write_lines(&ws.path("docs.jsonl"), &documents(2017));
        ok(&[
            "ingest",
            "--in",
            p(&ws.path("docs.jsonl")),
            "--out",
            p(&ws.path("passages.jsonl")),
            "--max-words",
            "12",
        ]);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn build_index(&self, corpus: &str, out: &str, encoder: Option<&str>) {
        let corpus = self.path(corpus);
        let out = self.path(out);
        let mut args = vec![
            "build-index",
            "--corpus",
            p(&corpus),
            "--out",
            p(&out),
            "--dim",
            "16",
            "--shards",
            "2",
        ];
        let enc;
        if let Some(e) = encoder {
            enc = self.path(e);
            args.extend(["--encoder", p(&enc)]);
        }
        ok(&args);
    }
}

#[test]
fn ingest_writes_passages_and_manifest() {
    let ws = Workspace::new();
    let text = fs::read_to_string(ws.path("passages.jsonl")).unwrap();
    let passages: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(passages.len(), 24);
    assert!(passages.iter().all(|p| p["dump_date"] == "2017-12-20"));
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(ws.path("passages.jsonl.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "ingest");
    let hash = manifest["input_hashes"][p(&ws.path("docs.jsonl"))]
        .as_str()
        .unwrap();
    assert_eq!(hash.len(), 64);
}

#[test]
fn index_search_and_compress() {
    let ws = Workspace::new();
    ws.build_index("passages.jsonl", "exact.ridx", None);
    assert!(ws.path("exact.ridx.encoder").exists());
    let enc = ws.path("exact.ridx.encoder");
    let exact = ws.path("exact.ridx");
    let hits = ok(&[
        "search",
        "--index",
        p(&exact),
        "--encoder",
        p(&enc),
        "--query",
        "capital of france",
        "--k",
        "3",
    ]);
    assert_eq!(hits.lines().count(), 3);

    let pq = ws.path("pq.ridx");
    let out = ok(&[
        "compress-index",
        "--index",
        p(&exact),
        "--out",
        p(&pq),
        "--m",
        "4",
        "--kc",
        "4",
    ]);
    assert!(out.contains("ratio"), "{out}");
    let hits = ok(&[
        "search",
        "--index",
        p(&pq),
        "--encoder",
        p(&enc),
        "--query",
        "river",
        "--k",
        "5",
    ]);
    assert_eq!(hits.lines().count(), 5);

    let again = ralab(&[
        "compress-index",
        "--index",
        p(&pq),
        "--out",
        p(&ws.path("x")),
        "--m",
        "4",
        "--kc",
        "4",
    ]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn repeated_training_is_byte_identical() {
    let ws = Workspace::new();
    let config = ws.path("train.toml");
    fs::write(&config, "steps = 12\nbatch_size = 4\nk = 4\nmode = \"full_refresh\"\nrefresh_interval = 5\ndim = 16\n").unwrap();
    let run = |out: &str| {
        let out = ws.path(out);
        ok(&[
            "train",
            "--config",
            p(&config),
            "--corpus",
            p(&ws.path("passages.jsonl")),
            "--out",
            p(&out),
            "--loss",
            "emdr2",
            "--seed",
            "3",
        ]);
        out
    };
    let (a, b) = (run("run-a"), run("run-b"));
    for file in ["metrics.csv", "encoder.bin", "index.ridx", "config.toml"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("step,loss,recall_at_1,index_version")
    );
    assert_eq!(csv.lines().count(), 13);
    // Flags win over the config file.
    let cfg = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(
        cfg.contains("loss = \"emdr2\"") && cfg.contains("seed = 3"),
        "{cfg}"
    );
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["index_version"], 3);
}

#[test]
fn evaluate_choice_and_qa_with_audit() {
    let ws = Workspace::new();
    ws.build_index("passages.jsonl", "exact.ridx", None);
    let tasks = ws.path("tasks.jsonl");
    write_lines(
        &tasks,
        &[
            json!({"question": "paris is the capital city of which country", "options": ["italy", "france", "spain", "austria"], "gold": 1}),
            json!({"question": "which river runs through vienna", "options": ["danube", "thames", "seine", "spree"], "gold": 0}),
            json!({"question": "the capital city of italy", "answers": ["rome"]}),
        ],
    );
    let out_dir = ws.path("eval");
    let out = ok(&[
        "evaluate",
        "--task",
        p(&tasks),
        "--index",
        p(&ws.path("exact.ridx")),
        "--encoder",
        p(&ws.path("exact.ridx.encoder")),
        "--corpus",
        p(&ws.path("passages.jsonl")),
        "--mode",
        "all24",
        "--k",
        "24",
        "--audit-leakage",
        "--out",
        p(&out_dir),
    ]);
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["choice_tasks"], 2);
    assert_eq!(report["qa_tasks"], 1);
    assert!(report["flagged_examples"].as_u64().is_some());
    assert!(out_dir.join("report.json").exists() && out_dir.join("manifest.json").exists());
}

#[test]
fn swap_index_crosses_dated_indices() {
    let ws = Workspace::new();
    let mut late = documents(2020);
    for d in &mut late {
        // Every city moves to the next river in the later snapshot.
        let text = d["sections"][0]["text"]
            .as_str()
            .unwrap()
            .replace("river", "river new");
        d["sections"][0]["text"] = json!(text);
    }
    write_lines(&ws.path("late.jsonl"), &late);
    ok(&[
        "ingest",
        "--in",
        p(&ws.path("late.jsonl")),
        "--out",
        p(&ws.path("late-passages.jsonl")),
        "--max-words",
        "12",
    ]);
    ws.build_index("passages.jsonl", "early.ridx", None);
    ws.build_index(
        "late-passages.jsonl",
        "late.ridx",
        Some("early.ridx.encoder"),
    );
    let tasks = ws.path("temporal.jsonl");
    write_lines(
        &tasks,
        &[
            json!({"query": "paris is the capital city of france and a large old town on the river", "answers_by_year": {"2017": "seine", "2020": "new"}}),
        ],
    );
    let out = ok(&[
        "swap-index",
        "--from",
        p(&ws.path("early.ridx")),
        "--to",
        p(&ws.path("late.ridx")),
        "--task",
        p(&tasks),
        "--encoder",
        p(&ws.path("early.ridx.encoder")),
        "--corpus",
        p(&ws.path("passages.jsonl")),
        "--corpus",
        p(&ws.path("late-passages.jsonl")),
        "--k",
        "3",
    ]);
    assert!(out.starts_with("answers\\index\t2017\t2020"), "{out}");

    let same = ralab(&[
        "swap-index",
        "--from",
        p(&ws.path("early.ridx")),
        "--to",
        p(&ws.path("early.ridx")),
        "--task",
        p(&tasks),
        "--encoder",
        p(&ws.path("early.ridx.encoder")),
        "--corpus",
        p(&ws.path("passages.jsonl")),
    ]);
    assert_eq!(same.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&same.stderr).contains("dump date"));
}

#[test]
fn cost_model_prints_the_worked_example() {
    let out = ok(&[
        "cost-model",
        "--n",
        "37000000",
        "--b",
        "64",
        "--k",
        "20",
        "--r",
        "1000",
        "--ratio",
        "0.04",
    ]);
    assert!(out.contains("0.289"), "{out}");
    assert!(out.contains("~30%"));
    let out = ok(&[
        "cost-model",
        "--n",
        "37000000",
        "--b",
        "64",
        "--k",
        "20",
        "--r",
        "1000",
        "--l",
        "200",
        "--pretr",
        "1",
        "--plm",
        "25",
    ]);
    assert!(
        out.lines()
            .any(|l| l.starts_with("rerank") && l.contains("1/10")),
        "{out}"
    );
}

#[test]
fn exit_codes() {
    assert_eq!(ralab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ralab(&["cost-model", "--n", "1"]).status.code(), Some(2));

    let missing = ralab(&[
        "ingest",
        "--in",
        "/nonexistent/docs.jsonl",
        "--out",
        "/tmp/never.jsonl",
    ]);
    assert_eq!(missing.status.code(), Some(1));

    let ws = Workspace::new();
    let bad = ws.path("bad.toml");
    fs::write(&bad, "batch_sise = 4\n").unwrap();
    let out = ralab(&[
        "train",
        "--config",
        p(&bad),
        "--corpus",
        p(&ws.path("passages.jsonl")),
        "--out",
        p(&ws.path("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sise"));

    let out = ralab(&[
        "train",
        "--corpus",
        p(&ws.path("passages.jsonl")),
        "--out",
        p(&ws.path("r")),
        "--temperature",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature"));

    let filter = ws.path("filter.toml");
    fs::write(&filter, "min_alnum_ratio = 2.0\n").unwrap();
    let out = ralab(&[
        "ingest",
        "--in",
        p(&ws.path("docs.jsonl")),
        "--out",
        p(&ws.path("x.jsonl")),
        "--filter-config",
        p(&filter),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("min_alnum_ratio"));
}

#[test]
fn help_lists_every_flag() {
    let help = ok(&["train", "--help"]);
    for flag in [
        "--config",
        "--corpus",
        "--out",
        "--loss",
        "--mode",
        "--refresh-interval",
        "--rerank-pool",
        "--threads",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    let help = ok(&["cost-model", "--help"]);
    for flag in [
        "--n", "--b", "--k", "--r", "--l", "--pretr", "--plm", "--ratio",
    ] {
        assert!(help.contains(flag), "{flag}");
    }
}
