//! End-to-end runs: pack, build, probes, generate, score, report.
//!
//! Each stage writes its outputs next to a `<output>.provenance.json` that
//! records the config digest and input digests. A stage whose outputs and
//! matching provenance already exist is skipped, so re-running a finished
//! run is a no-op. Outputs of a failed stage are moved to `quarantine/`.

mod config;

pub use config::{
    has_errors, CorpusInput, Diagnostic, GenerationSource, RunConfig, ScenarioConfig, Severity, SyntheticSource,
    DEFAULT_SWAP_LEN,
};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::canonical::to_canonical_string;
use crate::corpusgen::{build_dense, build_sparse, build_swapped, read_manifest, write_manifest, CorpusManifest, MixSpec, Scenario};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, file_digest, read_jsonl, sibling, write_jsonl};
use crate::metrics::{score_all, GenerationRecord, ScoreRecord};
use crate::oracles::{oracle_generate, MemorizerIndex};
use crate::packer::{pack, PackPolicy};
use crate::probekit::{emit_probes, probe_grid, read_probes};
use crate::report::write_report;
use crate::rng::{derive_seed, DetRng};
use crate::tokendata::{
    read_documents, read_segments, sidecar_path, write_segments, Document, SegmentId, SegmentStore, Source,
    StoreLayout, BYTE_VOCAB_SIZE, RESERVED_IDS,
};

const STREAM_SYNTHETIC: u64 = 0x73_79_6e;

/// Seeded documents of uniform tokens in `RESERVED_IDS..vocab_size`.
pub fn synthetic_documents(sources: &[SyntheticSource], vocab_size: u32, seed: u64) -> Vec<Document> {
    let span = u64::from(vocab_size.saturating_sub(RESERVED_IDS).max(1));
    let mut docs = Vec::new();
    for s in sources {
        for i in 0..s.documents {
            let mut rng = DetRng::derived(seed, &[STREAM_SYNTHETIC, s.source as u64, i as u64]);
            docs.push(Document {
                doc_id: format!("{}-{i:06}", s.source),
                source: s.source,
                tokens: (0..s.tokens_per_document)
                    .map(|_| RESERVED_IDS + rng.below(span) as u32)
                    .collect(),
            });
        }
    }
    docs
}

/// File names inside the work directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub segments: PathBuf,
    pub manifest: PathBuf,
    pub probes: PathBuf,
    pub generations: PathBuf,
    pub scores: PathBuf,
    pub report: PathBuf,
    pub ledger: PathBuf,
    pub quarantine: PathBuf,
}

impl RunPaths {
    pub fn new(config: &RunConfig) -> Self {
        let w = &config.work_dir;
        RunPaths {
            segments: match &config.corpus {
                CorpusInput::Segments(p) => p.clone(),
                _ => w.join("segments.bin"),
            },
            manifest: w.join("manifest.json"),
            probes: w.join("probes.jsonl"),
            generations: match &config.generation {
                GenerationSource::External(p) => p.clone(),
                GenerationSource::Oracle(_) => w.join("generations.jsonl"),
            },
            scores: w.join("scores.jsonl"),
            report: w.join("report"),
            ledger: w.join("run_ledger.json"),
            quarantine: w.join("quarantine"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
    External,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub stages: Vec<(&'static str, StageStatus)>,
    pub paths: RunPaths,
    /// Grid points dropped for not fitting the context window.
    pub probes_skipped: Option<usize>,
    pub unmatched_generations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Provenance {
    stage: String,
    config_digest: String,
    inputs: BTreeMap<String, String>,
    #[serde(default)]
    extra: BTreeMap<String, Value>,
}

/// SHA-256 of a file, or of the sorted `(name, digest)` list of a
/// directory's files.
pub fn path_digest(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        let mut h = Sha256::new();
        for p in entries {
            h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
            h.update(path_digest(&p)?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    } else {
        file_digest(path)
    }
}

fn file_key(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

struct Runner {
    digest: String,
    paths: RunPaths,
    stages: Vec<(&'static str, StageStatus)>,
    outputs: BTreeMap<String, String>,
}

impl Runner {
    fn provenance(&self, stage: &str, inputs: &[&Path]) -> Result<Provenance> {
        let mut map = BTreeMap::new();
        for p in inputs {
            map.insert(file_key(p), path_digest(p)?);
        }
        Ok(Provenance {
            stage: stage.into(),
            config_digest: self.digest.clone(),
            inputs: map,
            extra: BTreeMap::new(),
        })
    }

    /// Run `body` unless `outputs` are already present with matching
    /// provenance. Returns the stored extra fields.
    fn stage<F>(&mut self, name: &'static str, outputs: &[PathBuf], inputs: &[&Path], body: F) -> Result<BTreeMap<String, Value>>
    where
        F: FnOnce() -> Result<BTreeMap<String, Value>>,
    {
        let wrap = |e: Error| Error::Stage {
            stage: name,
            source: Box::new(e),
        };
        let prov_path = sibling(&outputs[0], ".provenance.json");
        let expected = self.provenance(name, inputs).map_err(wrap)?;

        if outputs.iter().all(|p| p.exists()) {
            if let Ok(text) = fs::read_to_string(&prov_path) {
                if let Ok(found) = serde_json::from_str::<Provenance>(&text) {
                    if found.stage == expected.stage
                        && found.config_digest == expected.config_digest
                        && found.inputs == expected.inputs
                    {
                        self.stages.push((name, StageStatus::Skipped));
                        self.record_outputs(outputs).map_err(wrap)?;
                        return Ok(found.extra);
                    }
                }
            }
        }

        let _ = fs::remove_file(&prov_path);
        match body() {
            Ok(extra) => {
                let prov = Provenance { extra: extra.clone(), ..expected };
                let text = to_canonical_string(&prov).map_err(|e| wrap(Error::json("provenance", e)))?;
                atomic_write(&prov_path, |w| w.write_all(text.as_bytes()).map_err(|e| Error::io(&prov_path, e)))
                    .map_err(wrap)?;
                self.stages.push((name, StageStatus::Ran));
                self.record_outputs(outputs).map_err(wrap)?;
                Ok(extra)
            }
            Err(e) => {
                self.quarantine(name, outputs);
                Err(wrap(e))
            }
        }
    }

    fn record_outputs(&mut self, outputs: &[PathBuf]) -> Result<()> {
        for p in outputs {
            self.outputs.insert(file_key(p), path_digest(p)?);
        }
        Ok(())
    }

    /// Best effort: move whatever a failed stage left behind out of the way.
    fn quarantine(&self, stage: &str, outputs: &[PathBuf]) {
        let dir = self.paths.quarantine.join(stage);
        for p in outputs {
            if p.exists() && fs::create_dir_all(&dir).is_ok() {
                let _ = fs::rename(p, dir.join(file_key(p)));
            }
        }
    }
}

fn pools(store: &SegmentStore, explicit: &Option<Vec<SegmentId>>, source: Source) -> Vec<SegmentId> {
    match explicit {
        Some(ids) => ids.clone(),
        None => store.ids_from(&[source]),
    }
}

/// Build the manifest a config describes from a loaded store.
pub fn build_manifest(config: &RunConfig, store: &SegmentStore) -> Result<CorpusManifest> {
    let seed = config.seed.ok_or_else(|| Error::Config("a seed is required".into()))?;
    let layout = store.layout().into();
    let sc = &config.scenario;
    let target = pools(store, &sc.target_pool, sc.target_source);
    let spec = || MixSpec {
        buckets: sc.buckets.clone(),
        target_fraction: sc.target_fraction.unwrap_or(1.0),
        seed,
        min_spacing: sc.min_spacing,
        batch_size_tokens: sc.batch_size_tokens,
    };
    match sc.kind {
        Scenario::Dense => {
            let ids = match &sc.target_pool {
                Some(ids) => ids.clone(),
                None => store.ids().collect(),
            };
            let mut m = build_dense(layout, &ids, sc.epochs.unwrap_or(1), seed)?;
            m.batch_size_tokens = sc.batch_size_tokens;
            Ok(m)
        }
        Scenario::Sparse => build_sparse(layout, &spec(), &target, &pools(store, &sc.filler_pool, sc.filler_source)),
        Scenario::Swapped => build_swapped(
            layout,
            &spec(),
            &target,
            &pools(store, &sc.donor_pool, sc.donor_source),
            &pools(store, &sc.filler_pool, sc.filler_source),
            sc.swap_len(),
        ),
    }
}

fn tokenizer_tag(config: &RunConfig) -> Result<String> {
    Ok(match &config.corpus {
        CorpusInput::Synthetic(_) => "synthetic".into(),
        CorpusInput::Segments(_) => "pretokenized".into(),
        CorpusInput::Documents(p) => {
            if read_documents(p)?.used_byte_fallback {
                "byte-fallback".into()
            } else {
                "pretokenized".into()
            }
        }
    })
}

fn pack_stage(config: &RunConfig, seed: u64, out: &Path) -> Result<BTreeMap<String, Value>> {
    let (docs, tokenizer) = match &config.corpus {
        CorpusInput::Synthetic(sources) => (
            synthetic_documents(sources, config.vocab_size_hint(), derive_seed(seed, &[STREAM_SYNTHETIC])),
            "synthetic",
        ),
        CorpusInput::Documents(p) => {
            let ing = read_documents(p)?;
            let tag = if ing.used_byte_fallback { "byte-fallback" } else { "pretokenized" };
            (ing.documents, tag)
        }
        CorpusInput::Segments(_) => unreachable!("pack stage runs only for document inputs"),
    };
    let vocab_size = config.vocab_size.unwrap_or_else(|| {
        let max = docs.iter().flat_map(|d| d.tokens.iter()).copied().max().unwrap_or(0);
        BYTE_VOCAB_SIZE.max(max.saturating_add(1))
    });
    let policy = PackPolicy {
        context_len: config.context_len,
        bod_id: config.bod_id,
        span_documents: config.span_documents,
        max_segments_per_doc: config.max_segments_per_doc,
    };
    let (segments, stats) = pack(&docs, &policy)?;
    let layout = StoreLayout {
        vocab_size,
        context_len: config.context_len,
        bod_id: config.bod_id,
    };
    write_segments(out, layout, &segments)?;
    let mut extra = BTreeMap::new();
    extra.insert("tokenizer".into(), Value::from(tokenizer));
    extra.insert(
        "pack_stats".into(),
        serde_json::to_value(stats).map_err(|e| Error::json("pack stats", e))?,
    );
    Ok(extra)
}

/// Run every stage, skipping those whose outputs are current.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    let diags = config.validate();
    if has_errors(&diags) {
        let msgs: Vec<String> = diags
            .iter()
            .filter(|d| d.severity == Severity::Error)
            .map(|d| d.to_string())
            .collect();
        return Err(Error::Config(msgs.join("; ")));
    }
    let seed = config.seed.expect("validated");
    fs::create_dir_all(&config.work_dir).map_err(|e| Error::io(&config.work_dir, e))?;

    let paths = RunPaths::new(config);
    let mut r = Runner {
        digest: config.digest()?,
        paths: paths.clone(),
        stages: Vec::new(),
        outputs: BTreeMap::new(),
    };

    let tokenizer = match &config.corpus {
        CorpusInput::Segments(_) => {
            r.stages.push(("pack", StageStatus::External));
            tokenizer_tag(config)?
        }
        CorpusInput::Documents(doc_path) => {
            let extra = r.stage("pack", &[paths.segments.clone(), sidecar_path(&paths.segments)], &[doc_path], || {
                pack_stage(config, seed, &paths.segments)
            })?;
            extra.get("tokenizer").and_then(Value::as_str).unwrap_or("unknown").to_string()
        }
        CorpusInput::Synthetic(_) => {
            let extra = r.stage("pack", &[paths.segments.clone(), sidecar_path(&paths.segments)], &[], || {
                pack_stage(config, seed, &paths.segments)
            })?;
            extra.get("tokenizer").and_then(Value::as_str).unwrap_or("unknown").to_string()
        }
    };

    let load_store = || read_segments(&paths.segments);
    r.stage("build", std::slice::from_ref(&paths.manifest), &[&paths.segments], || {
        let store = load_store()?;
        let m = build_manifest(config, &store)?;
        m.verify_accounting()?;
        write_manifest(&paths.manifest, &m)?;
        Ok(BTreeMap::new())
    })?;

    let extra = r.stage("probes", std::slice::from_ref(&paths.probes), &[&paths.segments, &paths.manifest], || {
        let store = load_store()?;
        let m = read_manifest(&paths.manifest)?;
        let grid = probe_grid(&m, &config.probes)?;
        emit_probes(&m, &store, &grid.specs, &paths.probes)?;
        let mut extra = BTreeMap::new();
        extra.insert("skipped".into(), Value::from(grid.skipped as u64));
        extra.insert("probes".into(), Value::from(grid.specs.len() as u64));
        Ok(extra)
    })?;
    let probes_skipped = extra.get("skipped").and_then(Value::as_u64).map(|v| v as usize);

    match &config.generation {
        GenerationSource::Oracle(oracle) => {
            r.stage(
                "generate",
                std::slice::from_ref(&paths.generations),
                &[&paths.segments, &paths.manifest, &paths.probes],
                || {
                    let store = load_store()?;
                    let m = read_manifest(&paths.manifest)?;
                    let index = MemorizerIndex::build(&m, &store)?;
                    let probes = read_probes(&paths.probes)?;
                    write_jsonl(&paths.generations, &oracle_generate(&index, oracle, &probes)?)?;
                    Ok(BTreeMap::new())
                },
            )?;
        }
        GenerationSource::External(p) => {
            r.stages.push(("generate", StageStatus::External));
            r.outputs.insert(file_key(p), path_digest(p)?);
        }
    }

    let mut unmatched = Vec::new();
    let extra = r.stage("score", std::slice::from_ref(&paths.scores), &[&paths.probes, &paths.generations], || {
        let probes = read_probes(&paths.probes)?;
        let gens: Vec<GenerationRecord> = read_jsonl(&paths.generations)?;
        let outcome = score_all(&probes, &gens, config.strict_join)?;
        write_jsonl(&paths.scores, &outcome.scores)?;
        let mut extra = BTreeMap::new();
        extra.insert("unmatched".into(), Value::from(outcome.unmatched));
        Ok(extra)
    })?;
    if let Some(Value::Array(ids)) = extra.get("unmatched") {
        unmatched = ids.iter().filter_map(|v| v.as_str().map(String::from)).collect();
    }

    r.stage("report", std::slice::from_ref(&paths.report), &[&paths.scores, &paths.probes], || {
        let scores: Vec<ScoreRecord> = read_jsonl(&paths.scores)?;
        let probes = read_probes(&paths.probes)?;
        if paths.report.exists() {
            fs::remove_dir_all(&paths.report).map_err(|e| Error::io(&paths.report, e))?;
        }
        write_report(&paths.report, &scores, &probes, &config.report)?;
        Ok(BTreeMap::new())
    })?;

    let mut inputs = BTreeMap::new();
    match &config.corpus {
        CorpusInput::Documents(p) | CorpusInput::Segments(p) => {
            inputs.insert(file_key(p), path_digest(p)?);
        }
        CorpusInput::Synthetic(_) => {}
    }
    let ledger = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config_digest": r.digest,
        "scenario": config.scenario.kind,
        "tokenizer": tokenizer,
        "inputs": inputs,
        "outputs": r.outputs,
    });
    let text = to_canonical_string(&ledger).map_err(|e| Error::json("run ledger", e))?;
    atomic_write(&paths.ledger, |w| {
        w.write_all(text.as_bytes()).map_err(|e| Error::io(&paths.ledger, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(&paths.ledger, e))
    })?;

    Ok(PipelineOutcome {
        stages: r.stages,
        paths,
        probes_skipped,
        unmatched_generations: unmatched,
    })
}
