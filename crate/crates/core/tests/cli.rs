mod common;

use std::path::Path;
use std::process::{Command, Output};

use switchgen::analysis::ReportRow;
use switchgen::cli::{checkpoint_path, RunConfig};
use switchgen::engine::GenerationRecord;
use switchgen::jsonl::read_jsonl;

fn switchgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_switchgen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(tasks: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.toml"), common::mock_config_toml(5)).unwrap();
        std::fs::write(dir.path().join("tasks.jsonl"), common::task_lines(tasks)).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_owned()
    }

    fn batch(&self, out: &str, extra: &[&str]) -> Output {
        let (c, t, o) = (
            self.path("config.toml"),
            self.path("tasks.jsonl"),
            self.path(out),
        );
        let mut args = vec!["batch", "--config", &c, "--tasks", &t, "--out", &o];
        args.extend_from_slice(extra);
        switchgen(&args)
    }
}

#[test]
fn run_prints_and_is_reproducible() {
    let ws = Workspace::new(1);
    let c = ws.path("config.toml");
    let a = switchgen(&["run", "--config", &c, "--query", "Add 2 and 2."]);
    assert!(a.status.success(), "{}", text(&a.stderr));
    let b = switchgen(&["run", "--config", &c, "--query", "Add 2 and 2."]);
    assert_eq!(a.stdout, b.stdout);
    let out = text(&a.stdout);
    assert!(out.contains("[ 0] model 2 aligned (forced"), "{out}");
    assert!(
        out.lines().filter(|l| l.starts_with('[')).count() == 6,
        "{out}"
    );

    let other = switchgen(&[
        "run",
        "--config",
        &c,
        "--query",
        "Add 2 and 2.",
        "--seed",
        "6",
    ]);
    assert!(other.status.success());
    assert_ne!(other.stdout, a.stdout);

    let json = switchgen(&["run", "--config", &c, "--query", "Add 2 and 2.", "--json"]);
    let rec: GenerationRecord = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(rec.trace.total_tokens(), 60);
}

#[test]
fn run_from_task_file() {
    let ws = Workspace::new(5);
    let (c, t) = (ws.path("config.toml"), ws.path("tasks.jsonl"));
    let out = switchgen(&["run", "--config", &c, "--tasks", &t, "--id", "q4", "--json"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let rec: GenerationRecord = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rec.query_id, "q4");
    assert_eq!(rec.instruction, "q4: please finish");
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let ws = Workspace::new(1);
    let bad =
        common::mock_config_toml(5).replace("members = [\"pretrained\"", "members = [\"nosuch\"");
    std::fs::write(ws.path("bad.toml"), bad).unwrap();
    let out = switchgen(&["run", "--config", &ws.path("bad.toml"), "--query", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(
        err.contains("pool.members[0]") && err.contains("nosuch"),
        "{err}"
    );

    let out = switchgen(&[
        "run",
        "--config",
        &ws.path("config.toml"),
        "--query",
        "x",
        "--top-p",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("top_p"));

    let out = switchgen(&["run", "--config", &ws.path("missing.toml"), "--query", "x"]);
    assert_eq!(out.status.code(), Some(2));

    let out = switchgen(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generation_failure_exits_1() {
    let ws = Workspace::new(1);
    let cfg = common::mock_config_toml(5).replace(
        "default = { text = \" ack\", tokens = 10 }",
        "default = { error = \"backend offline\" }",
    );
    std::fs::write(ws.path("failing.toml"), cfg).unwrap();
    let out = switchgen(&["run", "--config", &ws.path("failing.toml"), "--query", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("backend offline"));
    assert!(text(&out.stdout).contains("FAILED"));
}

#[test]
fn batch_lines_and_empty_input() {
    let ws = Workspace::new(7);
    let out = ws.batch("out.jsonl", &[]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let recs: Vec<GenerationRecord> = read_jsonl(Path::new(&ws.path("out.jsonl"))).unwrap();
    assert_eq!(
        recs.iter().map(|r| r.query_id.as_str()).collect::<Vec<_>>(),
        ["q0", "q1", "q2", "q3", "q4", "q5", "q6"]
    );
    assert!(!checkpoint_path(Path::new(&ws.path("out.jsonl"))).exists());

    // A completed output is overwritten by a fresh run, not appended to.
    let first = std::fs::read(ws.path("out.jsonl")).unwrap();
    assert!(ws.batch("out.jsonl", &[]).status.success());
    assert_eq!(std::fs::read(ws.path("out.jsonl")).unwrap(), first);

    std::fs::write(ws.path("empty.jsonl"), "").unwrap();
    let (c, t, o) = (
        ws.path("config.toml"),
        ws.path("empty.jsonl"),
        ws.path("none.jsonl"),
    );
    let out = switchgen(&["batch", "--config", &c, "--tasks", &t, "--out", &o]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(&o).unwrap(), "");
}

#[test]
fn interrupted_batch_resumes_to_identical_file() {
    let ws = Workspace::new(23);
    assert!(ws
        .batch("full.jsonl", &["--concurrency", "3"])
        .status
        .success());

    let partial = ws.path("resumed.jsonl");
    let out = ws.batch("resumed.jsonl", &["--concurrency", "3", "--limit", "7"]);
    assert!(out.status.success());
    assert!(text(&out.stdout).contains("resume"));
    let ckpt = checkpoint_path(Path::new(&partial));
    assert_eq!(std::fs::read_to_string(&ckpt).unwrap().lines().count(), 7);

    // A torn write after the last checkpointed line must be discarded.
    let mut torn = std::fs::read(&partial).unwrap();
    torn.extend_from_slice(b"{\"query_id\":\"q7\",\"tru");
    std::fs::write(&partial, torn).unwrap();

    assert!(ws
        .batch("resumed.jsonl", &["--concurrency", "5", "--limit", "9"])
        .status
        .success());
    assert!(ws.batch("resumed.jsonl", &[]).status.success());
    assert_eq!(
        std::fs::read(ws.path("full.jsonl")).unwrap(),
        std::fs::read(&partial).unwrap()
    );
    assert!(!ckpt.exists());
}

#[test]
fn eval_analyze_export_pipeline() {
    let ws = Workspace::new(15);
    assert!(ws.batch("records.jsonl", &[]).status.success());
    let (c, t) = (ws.path("config.toml"), ws.path("tasks.jsonl"));
    let (records, scored, results) = (
        ws.path("records.jsonl"),
        ws.path("scored.jsonl"),
        ws.path("results.jsonl"),
    );

    let out = switchgen(&["analyze", "--records", &records]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("eval"), "{}", text(&out.stderr));

    let out = switchgen(&[
        "eval",
        "--config",
        &c,
        "--records",
        &records,
        "--tasks",
        &t,
        "--out",
        &scored,
        "--results",
        &results,
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let recs: Vec<GenerationRecord> = read_jsonl(Path::new(&scored)).unwrap();
    assert!(recs.iter().all(|r| r.score.is_some()));
    let rows: Vec<serde_json::Value> = read_jsonl(Path::new(&results)).unwrap();
    assert_eq!(rows[0]["kind"], "task");
    assert_eq!(rows[0]["n"], 15);
    assert_eq!(rows.len(), 16);
    // The aligned model is forced onto the first patch and writes the gold "ack".
    assert_eq!(rows[0]["mean_score"], 1.0);

    let (report, csv) = (ws.path("report.jsonl"), ws.path("report.csv"));
    let out = switchgen(&[
        "analyze",
        "--records",
        &scored,
        "--out",
        &report,
        "--csv",
        &csv,
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("switching"));
    let rows: Vec<ReportRow> = read_jsonl(Path::new(&report)).unwrap();
    let direct = switchgen::analysis::analyze(&recs, None).unwrap();
    assert_eq!(rows, direct.rows());
    assert!(std::fs::read_to_string(&csv)
        .unwrap()
        .starts_with("task,sequence"));

    let pairs = ws.path("distill.jsonl");
    let out = switchgen(&[
        "export-distill",
        "--records",
        &scored,
        "--out",
        &pairs,
        "--min-score",
        "1",
    ]);
    assert!(out.status.success());
    let exported: Vec<serde_json::Value> = read_jsonl(Path::new(&pairs)).unwrap();
    assert_eq!(
        exported.len(),
        recs.iter().filter(|r| r.score >= Some(1.0)).count()
    );
    assert!(exported[0].get("instruction").is_some() && exported[0].get("response").is_some());
}

#[test]
fn collect_writes_per_task_datasets_and_merge_combines() {
    let ws = Workspace::new(4);
    let mut lines = common::task_lines(4);
    lines.push_str(&serde_json::json!({"id": "m0", "task": "mc", "instruction": "Pick one", "gold": "B", "scorer": {"kind": "multiple_choice"}}).to_string());
    lines.push('\n');
    std::fs::write(ws.path("tasks.jsonl"), lines).unwrap();
    let (c, t, d) = (
        ws.path("config.toml"),
        ws.path("tasks.jsonl"),
        ws.path("sft"),
    );
    let out = switchgen(&[
        "collect",
        "--config",
        &c,
        "--tasks",
        &t,
        "--out-dir",
        &d,
        "-k",
        "3",
        "--instances",
        "5",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    for task in ["arith", "mc"] {
        let p = Path::new(&d).join(format!("{task}.jsonl"));
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 5);
        assert!(Path::new(&d).join(format!("{task}.manifest.json")).exists());
    }
    let again = ws.path("sft2");
    assert!(switchgen(&[
        "collect",
        "--config",
        &c,
        "--tasks",
        &t,
        "--out-dir",
        &again,
        "-k",
        "3",
        "--instances",
        "5",
        "--concurrency",
        "1"
    ])
    .status
    .success());
    assert_eq!(
        std::fs::read(Path::new(&d).join("arith.jsonl")).unwrap(),
        std::fs::read(Path::new(&again).join("arith.jsonl")).unwrap()
    );

    let merged = ws.path("merged.jsonl");
    let (a, m) = (format!("{d}/arith.jsonl"), format!("{d}/mc.jsonl"));
    let out = switchgen(&[
        "merge-datasets",
        "--inputs",
        &a,
        &m,
        "--out",
        &merged,
        "--shuffle-seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(
        std::fs::read_to_string(&merged).unwrap().lines().count(),
        10
    );
}

#[test]
fn sample_config_in_examples_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/config.toml");
    let c = RunConfig::load(&path).unwrap();
    c.validate().unwrap();
    assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
}
