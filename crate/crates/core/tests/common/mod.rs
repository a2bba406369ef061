#![allow(dead_code)]

use std::path::{Path, PathBuf};

use memtrace_core::corpusgen::{BucketDef, Scenario};
use memtrace_core::oracles::OracleConfig;
use memtrace_core::packer::{pack, PackPolicy};
use memtrace_core::pipeline::{synthetic_documents, CorpusInput, GenerationSource, RunConfig, ScenarioConfig, SyntheticSource};
use memtrace_core::probekit::ProbeGrid;
use memtrace_core::report::ReportOptions;
use memtrace_core::tokendata::{Document, Segment, SegmentStore, Source, StoreLayout, BYTE_VOCAB_SIZE};

/// cl100k `<|endoftext|>`, used as BOD for real-tokenizer segments.
pub const CL100K_BOD: u32 = 100_257;
pub const CL100K_VOCAB: u32 = 100_277;

pub fn books_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/books")
}

/// Drop the Project Gutenberg header and footer when present.
pub fn strip_gutenberg(text: &str) -> &str {
    let start = match text.find("*** START OF") {
        Some(i) => text[i..].find('\n').map_or(text.len(), |j| i + j + 1),
        None => 0,
    };
    let end = text[start..].find("End of Project Gutenberg").map_or(text.len(), |j| start + j);
    &text[start..end]
}

/// The bundled books, tokenized with cl100k_base.
pub fn book_documents() -> Vec<Document> {
    let bpe = tiktoken_rs::cl100k_base().expect("cl100k_base loads");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(books_dir())
        .expect("books dir")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let raw = std::fs::read(p).expect("book text");
            let text = String::from_utf8_lossy(&raw);
            Document {
                doc_id: p.file_stem().unwrap().to_string_lossy().into_owned(),
                source: Source::Gutenberg,
                tokens: bpe.encode_ordinary(strip_gutenberg(&text)),
            }
        })
        .collect()
}

/// Book segments of `context_len` tokens under cl100k.
pub fn book_segments(context_len: usize) -> Vec<Segment> {
    let policy = PackPolicy {
        context_len,
        bod_id: CL100K_BOD,
        ..PackPolicy::default()
    };
    pack(&book_documents(), &policy).expect("books pack").0
}

/// Seeded uniform-token documents of `context_len - 1` tokens, one segment each.
pub fn synthetic_store(context_len: usize, sources: &[(Source, usize)], seed: u64) -> SegmentStore {
    let specs: Vec<SyntheticSource> = sources
        .iter()
        .map(|&(source, documents)| SyntheticSource {
            source,
            documents,
            tokens_per_document: context_len - 1,
        })
        .collect();
    let docs = synthetic_documents(&specs, BYTE_VOCAB_SIZE, seed);
    let policy = PackPolicy {
        context_len,
        ..PackPolicy::default()
    };
    let (segments, _) = pack(&docs, &policy).expect("synthetic pack");
    SegmentStore::new(StoreLayout::byte_fallback(context_len), segments).expect("store")
}

pub fn scenario(kind: Scenario) -> ScenarioConfig {
    ScenarioConfig {
        kind,
        buckets: Vec::new(),
        target_fraction: None,
        epochs: None,
        swap_len: None,
        min_spacing: None,
        batch_size_tokens: None,
        target_source: Source::Gutenberg,
        filler_source: Source::Fineweb,
        donor_source: Source::Gutenberg,
        target_pool: None,
        filler_pool: None,
        donor_pool: None,
    }
}

/// Dense single-epoch run over `segments` synthetic book segments.
pub fn dense_config(work_dir: &Path, seed: u64, segments: usize, context_len: usize, oracle: OracleConfig) -> RunConfig {
    RunConfig {
        seed: Some(seed),
        context_len,
        bod_id: 0,
        vocab_size: None,
        work_dir: work_dir.to_path_buf(),
        corpus: CorpusInput::Synthetic(vec![SyntheticSource {
            source: Source::Gutenberg,
            documents: segments,
            tokens_per_document: context_len - 1,
        }]),
        max_segments_per_doc: None,
        span_documents: false,
        scenario: ScenarioConfig {
            epochs: Some(1),
            ..scenario(Scenario::Dense)
        },
        probes: ProbeGrid::default(),
        generation: GenerationSource::Oracle(oracle),
        report: ReportOptions::default(),
        strict_join: true,
        threads: None,
    }
}

/// Sparse run with power-of-two buckets `1..=max_freq`, `per_bucket`
/// segments each, half the corpus filler.
pub fn sparse_config(work_dir: &Path, seed: u64, max_freq: u32, per_bucket: usize, context_len: usize, oracle: OracleConfig) -> RunConfig {
    let buckets: Vec<BucketDef> = memtrace_core::corpusgen::power_of_two_buckets(max_freq, per_bucket);
    let targets: usize = buckets.iter().map(|b| b.count).sum();
    let occurrences: u64 = buckets.iter().map(|b| u64::from(b.frequency) * b.count as u64).sum();
    let mut cfg = dense_config(work_dir, seed, targets, context_len, oracle);
    cfg.corpus = CorpusInput::Synthetic(vec![
        SyntheticSource {
            source: Source::Gutenberg,
            documents: targets,
            tokens_per_document: context_len - 1,
        },
        SyntheticSource {
            source: Source::Fineweb,
            documents: occurrences as usize + 8,
            tokens_per_document: context_len - 1,
        },
    ]);
    cfg.scenario = ScenarioConfig {
        buckets,
        target_fraction: Some(0.5),
        ..scenario(Scenario::Sparse)
    };
    cfg
}

/// Every regular file below `dir`, as sorted `(relative path, bytes)`.
pub fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).expect("read dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).expect("read file")));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
