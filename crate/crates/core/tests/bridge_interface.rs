//! The JSONL contracts shared with an external model runner: probes are
//! written by the core and read by the runner; generations flow back.

mod common;

use std::collections::BTreeSet;
use std::io::Write;

use memtrace_core::corpusgen::build_dense;
use memtrace_core::fsutil::read_jsonl;
use memtrace_core::metrics::{score_all, GenerationRecord};
use memtrace_core::probekit::{emit_probes, probe_grid, ProbeGrid, ProbeRecord};
use memtrace_core::report::{aggregate, GroupKey};
use memtrace_core::tokendata::Source;
use memtrace_core::Error;

fn probes_fixture(dir: &std::path::Path) -> Vec<ProbeRecord> {
    let store = common::synthetic_store(256, &[(Source::Gutenberg, 3)], 5);
    let ids: Vec<u64> = store.ids().collect();
    let m = build_dense(store.layout().into(), &ids, 2, 5).unwrap();
    let grid = ProbeGrid {
        offsets: vec![0, 4],
        prefix_lens: vec![16],
        suffix_lens: vec![1, 32],
        ..ProbeGrid::default()
    };
    let specs = probe_grid(&m, &grid).unwrap().specs;
    emit_probes(&m, &store, &specs, &dir.join("probes.jsonl")).unwrap()
}

fn write_lines(path: &std::path::Path, lines: &[String]) {
    let mut f = std::fs::File::create(path).unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
}

fn ints(v: &[u32]) -> String {
    serde_json::to_string(v).unwrap()
}

#[test]
fn probes_jsonl_schema() {
    let dir = tempfile::tempdir().unwrap();
    let probes = probes_fixture(dir.path());
    let text = std::fs::read_to_string(dir.path().join("probes.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), probes.len());
    let expected: BTreeSet<&str> = [
        "probe_id",
        "segment_id",
        "offset",
        "prefix_len",
        "suffix_len",
        "base",
        "bucket_frequency",
        "prefix",
        "true_suffix",
    ]
    .into();
    let mut last = String::new();
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, expected);
        let id = v["probe_id"].as_str().unwrap().to_string();
        assert_eq!(id.len(), 32);
        assert!(id > last, "probes not sorted by id");
        last = id;
        assert_eq!(v["prefix"].as_array().unwrap().len() as u64, v["prefix_len"].as_u64().unwrap());
        assert_eq!(v["true_suffix"].as_array().unwrap().len() as u64, v["suffix_len"].as_u64().unwrap());
        assert_eq!(v["bucket_frequency"].as_u64(), Some(2));
    }
}

#[test]
fn runner_generations_with_optional_fields() {
    let dir = tempfile::tempdir().unwrap();
    let probes = probes_fixture(dir.path());
    // A copying model on every probe, with teacher-forced log-probs and a
    // group-level mauve value on the first half.
    let lines: Vec<String> = probes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let lp = vec![-0.5f64; p.suffix_len];
            if i % 2 == 0 {
                format!(
                    r#"{{"probe_id":"{}","model_tag":"copier","generated_suffix":{},"ref_logprobs":{},"mauve":0.97}}"#,
                    p.probe_id,
                    ints(&p.true_suffix),
                    serde_json::to_string(&lp).unwrap()
                )
            } else {
                format!(
                    r#"{{"probe_id":"{}","model_tag":"copier","generated_suffix":{}}}"#,
                    p.probe_id,
                    ints(&p.true_suffix)
                )
            }
        })
        .collect();
    let path = dir.path().join("generations.jsonl");
    write_lines(&path, &lines);

    let gens: Vec<GenerationRecord> = read_jsonl(&path).unwrap();
    assert_eq!(gens.len(), probes.len());
    let out = score_all(&probes, &gens, true).unwrap();
    assert!(out.unmatched.is_empty());
    assert_eq!(out.scores.len(), probes.len());
    for s in &out.scores {
        assert!(s.em);
        assert_eq!(s.rouge_l, 1.0);
        assert_eq!(s.lccs, 1.0);
        match s.mauve {
            Some(m) => {
                assert_eq!(m, 0.97);
                assert_eq!(s.ppl, Some(0.5f64.exp()));
            }
            None => assert_eq!(s.ppl, None),
        }
    }
    let rows = aggregate(&out.scores, &probes, &[GroupKey::SuffixLen]).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.em_rate, 1.0);
        assert!(r.ppl.is_some() && r.mauve.is_some());
    }
    let single: Vec<_> = probes.iter().filter(|p| p.suffix_len == 1).collect();
    assert!(!single.is_empty());
}

fn one_line(probe: &ProbeRecord, extra: &str, suffix: &[u32]) -> GenerationRecord {
    let line = format!(
        r#"{{"probe_id":"{}","model_tag":"m","generated_suffix":{}{extra}}}"#,
        probe.probe_id,
        ints(suffix)
    );
    serde_json::from_str(&line).unwrap()
}

#[test]
fn malformed_generations_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let probes = probes_fixture(dir.path());
    let p = probes.iter().find(|p| p.suffix_len == 32).unwrap();
    let s = &p.true_suffix;

    let short = one_line(p, "", &s[..31]);
    assert!(matches!(score_all(&probes, &[short], true), Err(Error::Metric(_))));

    let lp_short = one_line(p, r#","ref_logprobs":[-1.0]"#, s);
    assert!(matches!(score_all(&probes, &[lp_short], true), Err(Error::Metric(_))));

    let positive = format!(r#","ref_logprobs":{}"#, serde_json::to_string(&vec![0.25f64; 32]).unwrap());
    let lp_pos = one_line(p, &positive, s);
    assert!(matches!(score_all(&probes, &[lp_pos], true), Err(Error::Metric(_))));

    let mauve = one_line(p, r#","mauve":1.5"#, s);
    assert!(score_all(&probes, &[mauve], true).is_err());

    let ok = one_line(p, "", s);
    let dup = score_all(&probes, &[ok.clone(), ok.clone()], true).unwrap_err();
    assert!(dup.to_string().contains(&p.probe_id));

    let mut other_model = ok.clone();
    other_model.model_tag = "m2".into();
    assert_eq!(score_all(&probes, &[ok.clone(), other_model], true).unwrap().scores.len(), 2);

    let mut dangling = ok.clone();
    dangling.probe_id = "ffffffffffffffffffffffffffffffff".into();
    assert!(matches!(
        score_all(&probes, &[ok.clone(), dangling.clone()], true),
        Err(Error::DanglingProbe(_))
    ));
    let lenient = score_all(&probes, &[ok, dangling], false).unwrap();
    assert_eq!(lenient.scores.len(), 1);
    assert_eq!(lenient.unmatched, vec!["ffffffffffffffffffffffffffffffff".to_string()]);

    assert!(score_all(&probes, &[], true).unwrap().scores.is_empty());
}
