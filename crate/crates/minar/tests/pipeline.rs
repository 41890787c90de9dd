//! End-to-end CLI pipeline: every artifact a command writes must be readable
//! by its consumer, and a fixed seed must make reruns byte-identical.

use std::path::Path;
use std::process::Command;

fn minar() -> Command {
    Command::new(env!("CARGO_BIN_EXE_minar"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().expect("spawn minar");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |path: &Path| path.to_str().unwrap().to_string();

    // Small data + a tiny model keep this fast; the pipeline mechanics are
    // what's under test.
    run_ok(minar().args([
        "gen-data",
        "--out-train",
        &s(&p("train.jsonl")),
        "--out-test",
        &s(&p("test.jsonl")),
        "--k",
        "2",
        "--seed",
        "11",
        "--test-count",
        "24",
        "--tasks",
        "sp",
    ]));
    run_ok(minar().args([
        "train",
        "--train",
        &s(&p("train.jsonl")),
        "--test",
        &s(&p("test.jsonl")),
        "--out-dir",
        &s(&p("run")),
        "--hidden",
        "8",
        "--embed",
        "4",
        "--epochs",
        "60",
        "--eval-every",
        "30",
        "--ckpt-every",
        "30",
        "--seed",
        "11",
    ]));
    let ckpt = p("run").join("ckpt_60.json");
    assert!(ckpt.exists());
    assert!(p("run").join("trainlog.csv").exists());

    run_ok(minar().args([
        "score",
        "--ckpt",
        &s(&ckpt),
        "--data",
        &s(&p("test.jsonl")),
        "--probe-limit",
        "4",
        "--method",
        "eap",
        "--out",
        &s(&p("scores.csv")),
    ]));
    run_ok(minar().args([
        "discover",
        "--ckpt",
        &s(&ckpt),
        "--scores",
        &s(&p("scores.csv")),
        "--k",
        "3",
        "--out",
        &s(&p("circuit.json")),
        "--dot",
        &s(&p("circuit.dot")),
    ]));
    run_ok(minar().args([
        "eval-circuit",
        "--ckpt",
        &s(&ckpt),
        "--circuit",
        &s(&p("circuit.json")),
        "--data",
        &s(&p("test.jsonl")),
        "--out",
        &s(&p("report.json")),
    ]));
    run_ok(minar().args([
        "overlap",
        "--ckpt",
        &s(&ckpt),
        "--circuits",
        &s(&p("circuit.json")),
        &s(&p("circuit.json")),
        "--out",
        &s(&p("overlap.csv")),
    ]));
    run_ok(minar().args([
        "sweep-k",
        "--ckpt",
        &s(&ckpt),
        "--data",
        &s(&p("test.jsonl")),
        "--probe-limit",
        "4",
        "--k",
        "1,2,3",
        "--methods",
        "weight,eap",
        "--m",
        "3",
        "--out",
        &s(&p("sweep.csv")),
    ]));
    run_ok(minar().args([
        "export-dot",
        "--ckpt",
        &s(&ckpt),
        "--out",
        &s(&p("graph.dot")),
    ]));

    // Artifacts parse back.
    let graphs = minar::graph::AttributedGraph::load_jsonl(&p("test.jsonl")).unwrap();
    assert_eq!(graphs.len(), 24);
    let table = minar::attribution::ScoreTable::read_csv(std::io::BufReader::new(
        std::fs::File::open(p("scores.csv")).unwrap(),
    ))
    .unwrap();
    assert!(!table.entries.is_empty());
    let circuit = minar::circuits::Circuit::load(&p("circuit.json")).unwrap();
    assert!(!circuit.is_empty());
    let report: serde_json::Value =
        serde_json::from_reader(std::fs::File::open(p("report.json")).unwrap()).unwrap();
    assert!(report.get("fidelity").is_some());
    let log = minar::training::TrainLog::read_csv(std::io::BufReader::new(
        std::fs::File::open(p("run").join("trainlog.csv")).unwrap(),
    ))
    .unwrap();
    assert_eq!(log.records.last().unwrap().epoch, 60);
    let overlap = std::fs::read_to_string(p("overlap.csv")).unwrap();
    assert!(overlap.lines().count() >= 3);
    let dot = std::fs::read_to_string(p("circuit.dot")).unwrap();
    assert!(dot.starts_with("digraph"));
    let sweep = std::fs::read_to_string(p("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 3);

    // The self-overlap matrix is exactly 1 on the diagonal.
    let row = overlap.lines().nth(1).unwrap();
    let cells: Vec<&str> = row.split(',').collect();
    assert_eq!(cells[1], "1");
    assert_eq!(cells[2], "1");
}

#[test]
fn same_seed_gives_byte_identical_artifacts() {
    // Two full pipeline runs with the same seed and layout, in separate
    // directories.
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let s = |path: &Path| path.to_str().unwrap().to_string();
    for dir in &dirs {
        let p = |name: &str| dir.path().join(name);
        run_ok(minar().args([
            "gen-data",
            "--out-train",
            &s(&p("train.jsonl")),
            "--out-test",
            &s(&p("test.jsonl")),
            "--seed",
            "7",
            "--test-count",
            "12",
        ]));
        run_ok(minar().args([
            "train",
            "--train",
            &s(&p("train.jsonl")),
            "--test",
            &s(&p("test.jsonl")),
            "--out-dir",
            &s(&p("run")),
            "--hidden",
            "6",
            "--embed",
            "3",
            "--epochs",
            "40",
            "--eval-every",
            "20",
            "--ckpt-every",
            "20",
            "--seed",
            "7",
        ]));
        run_ok(minar().args([
            "score",
            "--ckpt",
            &s(&p("run").join("ckpt_40.json")),
            "--data",
            &s(&p("test.jsonl")),
            "--probe-limit",
            "3",
            "--method",
            "eapig",
            "--m",
            "2",
            "--out",
            &s(&p("scores.csv")),
        ]));
    }
    for name in ["train.jsonl", "test.jsonl", "scores.csv"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs across identical seeds");
    }
    let a = std::fs::read(dirs[0].path().join("run").join("ckpt_40.json")).unwrap();
    let b = std::fs::read(dirs[1].path().join("run").join("ckpt_40.json")).unwrap();
    assert_eq!(a, b, "checkpoints differ across identical seeds");
}

#[test]
fn env_seed_fallback_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let via_env = dir.path().join("env.jsonl");
    let via_flag = dir.path().join("flag.jsonl");
    let mut cmd = minar();
    cmd.env("MINAR_SEED", "123").args([
        "gen-data",
        "--out-train",
        &s(&via_env),
        "--out-test",
        &s(&dir.path().join("env_test.jsonl")),
        "--test-count",
        "5",
    ]);
    run_ok(&mut cmd);
    run_ok(minar().args([
        "gen-data",
        "--out-train",
        &s(&via_flag),
        "--out-test",
        &s(&dir.path().join("flag_test.jsonl")),
        "--seed",
        "123",
        "--test-count",
        "5",
    ]));
    assert_eq!(std::fs::read(via_env).unwrap(), std::fs::read(via_flag).unwrap());
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let out = minar().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_file_is_a_data_error() {
    let out = minar()
        .args(["score", "--ckpt", "/nonexistent/ckpt.json", "--data", "/nonexistent/d.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
