mod common;

use memtrace_core::corpusgen::{build_dense, build_sparse, manifest_json, BucketDef, Layout, MixSpec};
use memtrace_core::metrics::score_all;
use memtrace_core::oracles::{oracle_generate, MemorizerIndex, OracleConfig};
use memtrace_core::probekit::{build_probes, probe_grid, ProbeGrid};
use memtrace_core::report::{aggregate, emit_grid, perfect_match_table, GroupKey, Metric, Stat};
use memtrace_core::tokendata::Source;

#[test]
fn dense_ten_thousand_segments_eighty_epochs() {
    let layout = Layout {
        context_len: 8192,
        bod_id: 0,
    };
    let ids: Vec<u64> = (0..10_000).collect();
    let m = build_dense(layout, &ids, 80, 17).unwrap();
    assert_eq!(m.schedule.len(), 800_000);
    m.verify_accounting().unwrap();
    let counts = m.occurrence_counts();
    assert_eq!(counts.len(), 10_000);
    assert!(counts.values().all(|&c| c == 80));
    assert_eq!(m.checkpoint_epochs, vec![1, 2, 4, 8, 16, 32, 64, 80]);
    // Every epoch is a permutation of the segment set.
    for epoch in m.schedule.chunks(10_000) {
        let mut seen: Vec<u64> = epoch.iter().map(|e| e.segment_id).collect();
        seen.sort_unstable();
        assert_eq!(seen, ids);
    }
    let again = build_dense(layout, &ids, 80, 17).unwrap();
    assert_eq!(manifest_json(&m, true).unwrap(), manifest_json(&again, true).unwrap());
}

#[test]
fn perfect_oracle_over_long_suffixes() {
    let store = common::synthetic_store(8192, &[(Source::Gutenberg, 3)], 8);
    let ids: Vec<u64> = store.ids().collect();
    let m = build_dense(store.layout().into(), &ids, 1, 8).unwrap();
    let grid = ProbeGrid {
        offsets: vec![0],
        prefix_lens: vec![50, 200],
        suffix_lens: vec![50, 500, 8000],
        ..ProbeGrid::default()
    };
    let g = probe_grid(&m, &grid).unwrap();
    assert_eq!(g.skipped, 3);
    let probes = build_probes(&m, &store, &g.specs).unwrap();
    let index = MemorizerIndex::build(&m, &store).unwrap();
    assert_eq!(index.corpus_len(), 3 * 8192 + 3);
    for p in &probes {
        assert_eq!(index.count(&p.prefix), 1, "prefix must be unique for a perfect-recall check");
    }
    let gens = oracle_generate(&index, &OracleConfig::perfect(), &probes).unwrap();
    let scores = score_all(&probes, &gens, true).unwrap().scores;
    assert!(scores.iter().all(|s| s.em && s.rouge_l == 1.0));

    let table = perfect_match_table(&scores, &probes).unwrap();
    assert_eq!(table.len(), 1);
    assert_eq!(table[0].max_suffix_len_with_em, 8000);
    assert_eq!(table[0].em_count, probes.iter().filter(|p| p.suffix_len == 8000).count());

    let rows = aggregate(&scores, &probes, &[GroupKey::PrefixLen, GroupKey::SuffixLen]).unwrap();
    let csv = emit_grid(&rows, GroupKey::SuffixLen, GroupKey::PrefixLen, Metric::RougeL, Stat::Mean).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "prefix_len\\suffix_len,50,500,8000");
    assert_eq!(lines[1], "50,1.000,1.000,1.000");
    assert_eq!(lines[2], "200,1.000,1.000,");

    assert!(oracle_generate(&index, &OracleConfig::perfect(), &[]).unwrap().is_empty());
}

#[test]
fn threshold_oracle_filters_by_exposure() {
    let store = common::synthetic_store(512, &[(Source::Gutenberg, 2), (Source::Fineweb, 80)], 4);
    let spec = MixSpec {
        buckets: vec![BucketDef { frequency: 8, count: 1 }, BucketDef { frequency: 64, count: 1 }],
        target_fraction: 0.5,
        seed: 4,
        min_spacing: None,
        batch_size_tokens: None,
    };
    let m = build_sparse(
        store.layout().into(),
        &spec,
        &store.ids_from(&[Source::Gutenberg]),
        &store.ids_from(&[Source::Fineweb]),
    )
    .unwrap();
    let grid = ProbeGrid {
        offsets: vec![0],
        prefix_lens: vec![100],
        suffix_lens: vec![100],
        ..ProbeGrid::default()
    };
    let probes = build_probes(&m, &store, &probe_grid(&m, &grid).unwrap().specs).unwrap();
    let index = MemorizerIndex::build(&m, &store).unwrap();
    let oracle = OracleConfig::threshold(32);
    let gens = oracle_generate(&index, &oracle, &probes).unwrap();
    let scores = score_all(&probes, &gens, true).unwrap().scores;
    for (p, s) in probes.iter().zip(&scores) {
        assert_eq!(p.probe_id, s.probe_id);
        match p.bucket_frequency {
            8 => assert!(!s.em && s.ttr <= 8.0 / 100.0),
            64 => assert!(s.em),
            f => panic!("unexpected bucket {f}"),
        }
    }
    assert!(gens.iter().all(|g| g.model_tag == "oracle:threshold:t=32,d=8"));
}
