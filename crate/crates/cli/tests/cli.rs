use std::path::Path;
use std::process::{Command, Output};

fn memtrace(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memtrace"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json summary on stdout")
}

/// Text documents of pseudo-random words, three per source.
fn write_docs(dir: &Path) {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut lines = String::new();
    for (i, source) in ["gutenberg", "gutenberg", "gutenberg", "gutenberg", "fineweb", "fineweb", "fineweb", "fineweb", "fineweb", "fineweb"]
        .iter()
        .enumerate()
    {
        let mut text = String::new();
        while text.len() < 1200 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            text.push_str(&format!("w{} ", state % 100_000));
        }
        let line = serde_json::json!({"doc_id": format!("d{i}"), "source": source, "text": text});
        lines.push_str(&format!("{line}\n"));
    }
    std::fs::write(dir.join("docs.jsonl"), lines).unwrap();
}

#[test]
fn stepwise_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_docs(d);

    let pack = ok(&memtrace(&["pack", "--in", "docs.jsonl", "--out", "seg.bin", "--context-len", "256"], d));
    assert_eq!(pack["byte_fallback"], true);
    assert_eq!(pack["segments"], 40);

    let build = ok(&memtrace(
        &[
            "build", "sparse", "--segments", "seg.bin", "--out", "manifest.json", "--seed", "5", "--bucket", "1:4",
            "--bucket", "4:4", "--bucket", "0:2", "--target-fraction", "0.5",
        ],
        d,
    ));
    assert_eq!(build["schedule_len"], 40);
    assert_eq!(build["fraction"], 0.5);

    let probes = ok(&memtrace(
        &[
            "probes", "--manifest", "manifest.json", "--segments", "seg.bin", "--offsets", "0,8", "--prefix-lens",
            "32", "--suffix-lens", "64,500", "--out", "probes.jsonl",
        ],
        d,
    ));
    assert_eq!(probes["probes"], 20);
    assert_eq!(probes["skipped"], 20);

    let oracle = ok(&memtrace(
        &[
            "oracle", "--kind", "threshold", "--min-freq", "4", "--ref-logprobs", "--manifest", "manifest.json",
            "--segments", "seg.bin", "--probes", "probes.jsonl", "--out", "gens.jsonl",
        ],
        d,
    ));
    assert_eq!(oracle["model_tag"], "oracle:threshold:t=4,d=8");
    assert_eq!(oracle["generations"], 20);

    let score = ok(&memtrace(&["score", "--probes", "probes.jsonl", "--generations", "gens.jsonl", "--out", "scores.jsonl"], d));
    assert_eq!(score["scores"], 20);

    ok(&memtrace(
        &[
            "report", "--scores", "scores.jsonl", "--probes", "probes.jsonl", "--group", "freq,offset", "--grid",
            "freq:offset", "--out", "report",
        ],
        d,
    ));
    let grid = std::fs::read_to_string(d.join("report/grid_rouge_l.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines[0], "bucket_frequency\\offset,0,8");
    assert_eq!(lines[3], "4,1.000,1.000");
    let table = std::fs::read_to_string(d.join("report/perfect_match.csv")).unwrap();
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.lines().nth(1).unwrap().contains(",4,"));
    assert!(d.join("report/aggregate.csv").exists());
    assert!(d.join("report/plot_rouge_l.json").exists());

    let gold = ok(&memtrace(&["goldfish", "--segments", "seg.bin", "--k", "4", "--h", "8", "--out", "mask.jsonl"], d));
    assert_eq!(gold["segments"], 40);
    let f = gold["fraction"].as_f64().unwrap();
    assert!(f > 0.15 && f < 0.35, "{f}");
}

#[test]
fn run_and_validate_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_docs(d);
    let config = r#"{
  "seed": 3,
  "context_len": 256,
  "work_dir": "work",
  "corpus": {"documents": "docs.jsonl"},
  "scenario": {"kind": "sparse", "buckets": [{"frequency": 2, "count": 2}, {"frequency": 0, "count": 1}], "target_fraction": 0.25},
  "probes": {"offsets": [0, 4], "prefix_lens": [32], "suffix_lens": [64]},
  "generation": {"oracle": {"kind": "perfect"}}
}"#;
    std::fs::write(d.join("run.json"), config).unwrap();

    let v = memtrace(&["validate", "--config", "run.json"], d);
    assert!(v.status.success());
    let text = String::from_utf8_lossy(&v.stdout);
    assert!(text.contains("note: scenario.buckets"));
    assert!(text.trim_end().ends_with("ok"));

    let first = memtrace(&["--threads", "2", "run", "--config", "run.json"], d);
    ok(&first);
    assert!(String::from_utf8_lossy(&first.stderr).contains("score: ran"));
    let scores = std::fs::read(d.join("work/scores.jsonl")).unwrap();

    let second = memtrace(&["run", "--config", "run.json"], d);
    ok(&second);
    assert!(String::from_utf8_lossy(&second.stderr).contains("score: skipped"));
    assert_eq!(std::fs::read(d.join("work/scores.jsonl")).unwrap(), scores);

    // A different work dir gives identical bytes.
    ok(&memtrace(&["run", "--config", "run.json", "--work-dir", "other"], d));
    assert_eq!(std::fs::read(d.join("other/scores.jsonl")).unwrap(), scores);
    assert_eq!(
        std::fs::read(d.join("other/run_ledger.json")).unwrap(),
        std::fs::read(d.join("work/run_ledger.json")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    std::fs::write(
        d.join("noseed.json"),
        r#"{"work_dir": "w", "corpus": {"synthetic": [{"source": "gutenberg", "documents": 2, "tokens_per_document": 63}]},
            "context_len": 64, "scenario": {"kind": "dense"}, "generation": {"oracle": {"kind": "perfect"}}}"#,
    )
    .unwrap();
    let v = memtrace(&["validate", "--config", "noseed.json"], d);
    assert_eq!(v.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&v.stdout).contains("error: seed"));
    let r = memtrace(&["run", "--config", "noseed.json"], d);
    assert_eq!(r.status.code(), Some(1));
    assert!(!d.join("w").exists());
    let r = memtrace(&["run", "--config", "noseed.json", "--seed", "1"], d);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));

    assert_eq!(memtrace(&["build", "dense"], d).status.code(), Some(1));
    assert_eq!(memtrace(&["frobnicate"], d).status.code(), Some(1));

    let missing = memtrace(&["score", "--probes", "nope.jsonl", "--generations", "nope.jsonl", "--out", "s.jsonl"], d);
    assert_eq!(missing.status.code(), Some(3));

    std::fs::write(d.join("bad.bin"), b"NOTASTORE and then some more bytes to pass the length").unwrap();
    let bad = memtrace(&["goldfish", "--segments", "bad.bin", "--out", "m.jsonl"], d);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bad magic"));

    let probes = memtrace(&["probes", "--manifest", "x", "--segments", "y", "--offsets", "", "--out", "p"], d);
    assert_eq!(probes.status.code(), Some(1));
}
