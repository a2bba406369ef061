use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_string;
use crate::corpusgen::{BucketDef, Scenario};
use crate::error::{Error, Result};
use crate::oracles::OracleConfig;
use crate::probekit::ProbeGrid;
use crate::report::ReportOptions;
use crate::tokendata::{SegmentId, Source, TokenId, BOD_ID, BYTE_VOCAB_SIZE, DEFAULT_CONTEXT_LEN};
use sha2::{Digest, Sha256};

/// One run of the whole pipeline. Relative paths resolve against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required; there is no implicit default.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_context_len")]
    pub context_len: usize,
    #[serde(default)]
    pub bod_id: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u32>,
    pub work_dir: PathBuf,
    pub corpus: CorpusInput,
    #[serde(default)]
    pub max_segments_per_doc: Option<usize>,
    #[serde(default)]
    pub span_documents: bool,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub probes: ProbeGrid,
    pub generation: GenerationSource,
    #[serde(default)]
    pub report: ReportOptions,
    /// Dangling probe ids in generations are errors rather than warnings.
    #[serde(default = "yes")]
    pub strict_join: bool,
    /// Worker cap. Never affects outputs, so it is excluded from the digest.
    #[serde(default, skip_serializing)]
    pub threads: Option<usize>,
}

fn default_context_len() -> usize {
    DEFAULT_CONTEXT_LEN
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusInput {
    /// Document ingestion JSONL.
    Documents(PathBuf),
    /// An existing segment store; packing is skipped.
    Segments(PathBuf),
    /// Seeded uniform-random documents.
    Synthetic(Vec<SyntheticSource>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub source: Source,
    pub documents: usize,
    pub tokens_per_document: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: Scenario,
    #[serde(default)]
    pub buckets: Vec<BucketDef>,
    #[serde(default)]
    pub target_fraction: Option<f64>,
    #[serde(default)]
    pub epochs: Option<u32>,
    #[serde(default)]
    pub swap_len: Option<usize>,
    #[serde(default)]
    pub min_spacing: Option<u64>,
    #[serde(default)]
    pub batch_size_tokens: Option<u64>,
    #[serde(default = "gutenberg")]
    pub target_source: Source,
    #[serde(default = "fineweb")]
    pub filler_source: Source,
    #[serde(default = "gutenberg")]
    pub donor_source: Source,
    /// Explicit pools override the source-based ones.
    #[serde(default)]
    pub target_pool: Option<Vec<SegmentId>>,
    #[serde(default)]
    pub filler_pool: Option<Vec<SegmentId>>,
    #[serde(default)]
    pub donor_pool: Option<Vec<SegmentId>>,
}

fn gutenberg() -> Source {
    Source::Gutenberg
}

fn fineweb() -> Source {
    Source::Fineweb
}

pub const DEFAULT_SWAP_LEN: usize = 4000;

impl ScenarioConfig {
    pub fn swap_len(&self) -> usize {
        self.swap_len.unwrap_or(DEFAULT_SWAP_LEN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GenerationSource {
    Oracle(OracleConfig),
    /// Generations JSONL produced outside the pipeline.
    External(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Note,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Note => "note",
        };
        write!(f, "{tag}: {}: {}", self.field, self.message)
    }
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.severity == Severity::Error)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(root);
        Ok(cfg)
    }

    /// Make relative paths absolute against `root`.
    pub fn resolve_paths(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        fix(&mut self.work_dir);
        match &mut self.corpus {
            CorpusInput::Documents(p) | CorpusInput::Segments(p) => fix(p),
            CorpusInput::Synthetic(_) => {}
        }
        if let GenerationSource::External(p) = &mut self.generation {
            fix(p);
        }
    }

    /// SHA-256 of the canonical JSON of every output-affecting field.
    /// `work_dir` and `threads` are excluded.
    pub fn digest(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::json("config", e))?;
        if let Some(o) = v.as_object_mut() {
            o.remove("work_dir");
        }
        let text = to_canonical_string(&v).map_err(|e| Error::json("config", e))?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn vocab_size_hint(&self) -> u32 {
        self.vocab_size.unwrap_or(BYTE_VOCAB_SIZE)
    }

    /// Every violated constraint, plus notes on legal-but-unusual choices.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut d = Vec::new();
        let mut err = |field: &str, message: String| {
            d.push(Diagnostic {
                severity: Severity::Error,
                field: field.into(),
                message,
            })
        };

        if self.seed.is_none() {
            err("seed", "a seed is required".into());
        }
        if self.context_len < 2 {
            err("context_len", format!("must be at least 2, got {}", self.context_len));
        }
        if let Some(v) = self.vocab_size {
            if self.bod_id >= v {
                err("bod_id", format!("{} is not below vocab_size {v}", self.bod_id));
            }
        } else if self.bod_id != BOD_ID && self.bod_id >= BYTE_VOCAB_SIZE {
            err("bod_id", format!("{} is outside the default vocabulary", self.bod_id));
        }

        match &self.corpus {
            CorpusInput::Documents(p) | CorpusInput::Segments(p) => {
                if !p.is_file() {
                    err("corpus", format!("{} does not exist", p.display()));
                }
            }
            CorpusInput::Synthetic(sources) => {
                if sources.is_empty() {
                    err("corpus.synthetic", "no synthetic sources".into());
                }
                let mut seen = HashSet::new();
                for s in sources {
                    if !seen.insert(s.source) {
                        err("corpus.synthetic", format!("source {} listed twice", s.source));
                    }
                    if s.documents == 0 || s.tokens_per_document == 0 {
                        err("corpus.synthetic", format!("source {} generates no tokens", s.source));
                    }
                }
            }
        }
        if let Some(0) = self.max_segments_per_doc {
            err("max_segments_per_doc", "must be at least 1".into());
        }

        let sc = &self.scenario;
        match sc.kind {
            Scenario::Dense => {
                if sc.epochs.unwrap_or(1) < 1 {
                    err("scenario.epochs", "dense scenario needs at least one epoch".into());
                }
            }
            Scenario::Sparse | Scenario::Swapped => {
                if sc.buckets.is_empty() {
                    err("scenario.buckets", "at least one bucket is required".into());
                }
                match sc.target_fraction {
                    None => err("scenario.target_fraction", "required for sparse and swapped scenarios".into()),
                    Some(f) if !(f > 0.0 && f <= 1.0) => {
                        err("scenario.target_fraction", format!("must be in (0, 1], got {f}"))
                    }
                    _ => {}
                }
                let overlap = match (&sc.target_pool, &sc.filler_pool) {
                    (Some(t), Some(f)) => {
                        let t: HashSet<_> = t.iter().collect();
                        f.iter().any(|s| t.contains(s))
                    }
                    (None, None) => sc.target_source == sc.filler_source,
                    _ => false,
                };
                if overlap {
                    err("scenario", "target and filler pools overlap".into());
                }
            }
        }
        if sc.kind == Scenario::Swapped {
            let s = sc.swap_len();
            if s == 0 || s + 1 >= self.context_len {
                err(
                    "scenario.swap_len",
                    format!(
                        "swapped scenario requires 0 < swap_len < context_len - 1 (swap_len {s}, context_len {})",
                        self.context_len
                    ),
                );
            }
        }

        if let Err(e) = self.probes.validate() {
            err("probes", e.to_string());
        }
        match &self.generation {
            GenerationSource::Oracle(o) => {
                if let Err(e) = o.validate() {
                    err("generation.oracle", e.to_string());
                }
            }
            GenerationSource::External(p) => {
                if !p.is_file() {
                    err("generation.external", format!("{} does not exist", p.display()));
                }
            }
        }
        if let Some((x, y)) = self.report.grid {
            if x == y {
                err("report.grid", "grid axes must differ".into());
            }
        }
        if self.report.group_keys.is_empty() {
            err("report.group_keys", "at least one group key is required".into());
        }

        if sc.kind != Scenario::Dense {
            for b in sc.buckets.iter().filter(|b| b.frequency == 0) {
                d.push(Diagnostic {
                    severity: Severity::Note,
                    field: "scenario.buckets".into(),
                    message: format!(
                        "frequency-0 bucket of {} segments is a held-out control: listed and probed, never trained on",
                        b.count
                    ),
                });
            }
        }
        d
    }
}
