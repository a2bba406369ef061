//! Memorizer oracles: deterministic "models" that answer a probe by looking
//! the prefix up in the training corpus. Their behavior is known exactly, so
//! they validate probing, scoring and reporting end to end.

pub mod suffix_array;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpusgen::{CorpusManifest, Materializer};
use crate::error::{Error, Result};
use crate::fsutil::write_jsonl;
use crate::metrics::GenerationRecord;
use crate::probekit::{read_probes, ProbeRecord};
use crate::tokendata::{SegmentId, SegmentStore, TokenId};

/// Separates segments in the joined corpus. Never a valid token.
pub const SENTINEL: TokenId = u32::MAX;

pub const DEFAULT_PERIOD: usize = 8;

/// Log-probability mass given to a mismatched token in synthetic
/// reference log-probabilities.
pub const LOGPROB_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Perfect,
    Anchored,
    Threshold,
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleKind::Perfect => "perfect",
            OracleKind::Anchored => "anchored",
            OracleKind::Threshold => "threshold",
        })
    }
}

impl FromStr for OracleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perfect" => Ok(OracleKind::Perfect),
            "anchored" => Ok(OracleKind::Anchored),
            "threshold" => Ok(OracleKind::Threshold),
            other => Err(Error::Config(format!("unknown oracle kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub kind: OracleKind,
    /// Anchored: an occurrence qualifies only if it starts at most this many
    /// tokens past the probe base.
    #[serde(default)]
    pub anchor_window: usize,
    /// Threshold: minimum exposure count of the occurrence's segment.
    #[serde(default = "default_min_freq")]
    pub min_freq: u64,
    #[serde(default = "default_period")]
    pub degeneration_period: usize,
    /// Attach synthetic reference log-probabilities to each generation.
    #[serde(default)]
    pub ref_logprobs: bool,
}

fn default_min_freq() -> u64 {
    1
}

fn default_period() -> usize {
    DEFAULT_PERIOD
}

impl OracleConfig {
    pub fn perfect() -> Self {
        OracleConfig {
            kind: OracleKind::Perfect,
            anchor_window: 0,
            min_freq: 1,
            degeneration_period: DEFAULT_PERIOD,
            ref_logprobs: false,
        }
    }

    pub fn anchored(anchor_window: usize) -> Self {
        OracleConfig {
            kind: OracleKind::Anchored,
            anchor_window,
            ..Self::perfect()
        }
    }

    pub fn threshold(min_freq: u64) -> Self {
        OracleConfig {
            kind: OracleKind::Threshold,
            min_freq,
            ..Self::perfect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degeneration_period == 0 {
            return Err(Error::Config("degeneration period must be at least 1".into()));
        }
        if self.kind == OracleKind::Threshold && self.min_freq == 0 {
            return Err(Error::Config("threshold oracle needs min_freq >= 1".into()));
        }
        Ok(())
    }

    /// `oracle:{kind}:{params}`.
    pub fn model_tag(&self) -> String {
        let d = self.degeneration_period;
        match self.kind {
            OracleKind::Perfect => format!("oracle:perfect:d={d}"),
            OracleKind::Anchored => format!("oracle:anchored:a={},d={d}", self.anchor_window),
            OracleKind::Threshold => format!("oracle:threshold:t={},d={d}", self.min_freq),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    segment_id: SegmentId,
    start: usize,
    len: usize,
}

/// Where a prefix occurs: segment and in-segment start position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Hit {
    pub segment_id: SegmentId,
    pub position: usize,
    entry: usize,
}

/// Suffix-array index over every distinct materialized training segment.
pub struct MemorizerIndex {
    corpus: Vec<TokenId>,
    sa: Vec<u32>,
    entries: Vec<Entry>,
    exposure: HashMap<SegmentId, u64>,
}

impl MemorizerIndex {
    /// Index the unique contents of all scheduled occurrences. Exposure
    /// counts are the manifest's occurrence counts.
    pub fn build(manifest: &CorpusManifest, store: &SegmentStore) -> Result<Self> {
        let materializer = Materializer::new(manifest, store)?;
        let mut seen: HashSet<[u8; 32]> = HashSet::new();
        let mut corpus = Vec::new();
        let mut entries = Vec::new();
        for e in &manifest.schedule {
            let seg = materializer.materialize(e)?;
            let mut h = Sha256::new();
            h.update(seg.segment_id.to_le_bytes());
            for t in &seg.tokens {
                h.update(t.to_le_bytes());
            }
            if !seen.insert(h.finalize().into()) {
                continue;
            }
            entries.push(Entry {
                segment_id: seg.segment_id,
                start: corpus.len(),
                len: seg.tokens.len(),
            });
            corpus.extend_from_slice(&seg.tokens);
            corpus.push(SENTINEL);
        }
        Ok(Self::from_parts(corpus, entries, manifest.occurrence_counts()))
    }

    /// Index explicit segments, each with the given exposure count.
    pub fn from_segments<'a>(segments: impl IntoIterator<Item = (SegmentId, &'a [TokenId], u64)>) -> Self {
        let mut corpus = Vec::new();
        let mut entries = Vec::new();
        let mut exposure = HashMap::new();
        for (segment_id, tokens, count) in segments {
            entries.push(Entry {
                segment_id,
                start: corpus.len(),
                len: tokens.len(),
            });
            corpus.extend_from_slice(tokens);
            corpus.push(SENTINEL);
            *exposure.entry(segment_id).or_insert(0) += count;
        }
        Self::from_parts(corpus, entries, exposure)
    }

    fn from_parts(corpus: Vec<TokenId>, entries: Vec<Entry>, exposure: HashMap<SegmentId, u64>) -> Self {
        let sa = suffix_array::build(&corpus);
        MemorizerIndex {
            corpus,
            sa,
            entries,
            exposure,
        }
    }

    pub fn corpus_len(&self) -> usize {
        self.corpus.len()
    }

    pub fn segment_count(&self) -> usize {
        self.entries.len()
    }

    pub fn exposure(&self, segment_id: SegmentId) -> u64 {
        self.exposure.get(&segment_id).copied().unwrap_or(0)
    }

    /// Every occurrence of `pattern`, sorted by `(segment_id, position)`.
    pub fn locate(&self, pattern: &[TokenId]) -> Vec<Hit> {
        if pattern.is_empty() || pattern.contains(&SENTINEL) {
            return Vec::new();
        }
        let range = suffix_array::find_range(&self.corpus, &self.sa, pattern);
        let mut hits: Vec<Hit> = self.sa[range]
            .iter()
            .map(|&p| {
                let p = p as usize;
                let entry = self.entries.partition_point(|e| e.start <= p) - 1;
                let e = &self.entries[entry];
                Hit {
                    segment_id: e.segment_id,
                    position: p - e.start,
                    entry,
                }
            })
            .collect();
        hits.sort_unstable();
        hits
    }

    pub fn count(&self, pattern: &[TokenId]) -> usize {
        if pattern.is_empty() || pattern.contains(&SENTINEL) {
            return 0;
        }
        suffix_array::find_range(&self.corpus, &self.sa, pattern).len()
    }

    fn qualifies(&self, config: &OracleConfig, hit: &Hit, base: usize) -> bool {
        match config.kind {
            OracleKind::Perfect => true,
            OracleKind::Anchored => hit.position <= base + config.anchor_window,
            OracleKind::Threshold => self.exposure(hit.segment_id) >= config.min_freq,
        }
    }

    /// The oracle's `m`-token continuation of `prefix`. `base` is the probe
    /// base used by the anchored filter.
    pub fn generate(&self, config: &OracleConfig, prefix: &[TokenId], m: usize, base: usize) -> Vec<TokenId> {
        let d = config.degeneration_period.max(1);
        let hit = self
            .locate(prefix)
            .into_iter()
            .find(|h| self.qualifies(config, h, base));
        let Some(hit) = hit else {
            return cycle_tail(prefix, d, m);
        };
        let e = &self.entries[hit.entry];
        let seg = &self.corpus[e.start..e.start + e.len];
        let from = hit.position + prefix.len();
        let to = (from + m).min(seg.len());
        if to - from == m {
            return seg[from..to].to_vec();
        }
        let mut out = seg[from..to].to_vec();
        let tail = cycle_tail(&seg[..to], d, m - out.len());
        out.extend(tail);
        out
    }
}

/// The last `d` tokens of `tokens` repeated cyclically to length `m`.
pub fn cycle_tail(tokens: &[TokenId], d: usize, m: usize) -> Vec<TokenId> {
    let tail = &tokens[tokens.len().saturating_sub(d)..];
    if tail.is_empty() {
        return Vec::new();
    }
    tail.iter().copied().cycle().take(m).collect()
}

/// `ln(1 - eps)` where the oracle's token equals the true token, `ln(eps)`
/// elsewhere.
pub fn synthetic_logprobs(generated: &[TokenId], truth: &[TokenId]) -> Vec<f64> {
    let (hit, miss) = ((1.0 - LOGPROB_EPSILON).ln(), LOGPROB_EPSILON.ln());
    truth
        .iter()
        .enumerate()
        .map(|(i, t)| if generated.get(i) == Some(t) { hit } else { miss })
        .collect()
}

/// One generation per probe, sorted by probe id.
pub fn oracle_generate(index: &MemorizerIndex, config: &OracleConfig, probes: &[ProbeRecord]) -> Result<Vec<GenerationRecord>> {
    config.validate()?;
    let tag = config.model_tag();
    let mut out: Vec<GenerationRecord> = probes
        .par_iter()
        .map(|p| {
            let y = index.generate(config, &p.prefix, p.suffix_len, p.base);
            GenerationRecord {
                probe_id: p.probe_id.clone(),
                model_tag: tag.clone(),
                ref_logprobs: config.ref_logprobs.then(|| synthetic_logprobs(&y, &p.true_suffix)),
                generated_suffix: y,
                mauve: None,
            }
        })
        .collect();
    out.sort_by(|a, b| a.probe_id.cmp(&b.probe_id));
    Ok(out)
}

pub fn oracle_generate_file(index: &MemorizerIndex, config: &OracleConfig, probes: &Path, out: &Path) -> Result<Vec<GenerationRecord>> {
    let records = read_probes(probes)?;
    let gens = oracle_generate(index, config, &records)?;
    write_jsonl(out, &gens)?;
    Ok(gens)
}
