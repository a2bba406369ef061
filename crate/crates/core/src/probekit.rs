//! Offset-parameterized probes: a prefix `x` and the true suffix `s` that
//! follows it inside a training segment.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpusgen::{CorpusManifest, Materializer};
use crate::error::{Error, Result};
use crate::fsutil::{read_jsonl, write_jsonl};
use crate::rng::DetRng;
use crate::tokendata::{Segment, SegmentId, SegmentStore, TokenId};

pub const DEFAULT_OFFSETS: [usize; 13] = [0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048];
pub const DEFAULT_PREFIX_LENS: [usize; 11] = [50, 100, 250, 500, 750, 1000, 1500, 2000, 3000, 4000, 5000];
pub const DEFAULT_SUFFIX_LEN: usize = 500;

const STREAM_PROBE_SAMPLE: u64 = 0x70_72_6f_62;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub probe_id: String,
    pub segment_id: SegmentId,
    pub offset: usize,
    pub prefix_len: usize,
    pub suffix_len: usize,
    /// Index of the first probe-able token: 1 after BOD, or the start of the
    /// retained part.
    pub base: usize,
    pub bucket_frequency: u32,
}

impl ProbeSpec {
    pub fn new(segment_id: SegmentId, offset: usize, prefix_len: usize, suffix_len: usize, base: usize, bucket_frequency: u32) -> Self {
        ProbeSpec {
            probe_id: probe_id(segment_id, offset, prefix_len, suffix_len),
            segment_id,
            offset,
            prefix_len,
            suffix_len,
            base,
            bucket_frequency,
        }
    }

    pub fn prefix_start(&self) -> usize {
        self.base + self.offset
    }

    /// One past the last suffix token.
    pub fn end(&self) -> usize {
        self.base + self.offset + self.prefix_len + self.suffix_len
    }

    pub fn fits(&self, context_len: usize) -> bool {
        self.prefix_len >= 1 && self.suffix_len >= 1 && self.end() <= context_len
    }
}

/// One line of a probes file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub probe_id: String,
    pub segment_id: SegmentId,
    pub offset: usize,
    pub prefix_len: usize,
    pub suffix_len: usize,
    pub base: usize,
    pub bucket_frequency: u32,
    pub prefix: Vec<TokenId>,
    pub true_suffix: Vec<TokenId>,
}

impl ProbeRecord {
    pub fn spec(&self) -> ProbeSpec {
        ProbeSpec {
            probe_id: self.probe_id.clone(),
            segment_id: self.segment_id,
            offset: self.offset,
            prefix_len: self.prefix_len,
            suffix_len: self.suffix_len,
            base: self.base,
            bucket_frequency: self.bucket_frequency,
        }
    }
}

/// Stable content id: the first 16 bytes of SHA-256 over the little-endian
/// `(segment_id, offset, prefix_len, suffix_len)`, in hex.
pub fn probe_id(segment_id: SegmentId, offset: usize, prefix_len: usize, suffix_len: usize) -> String {
    let mut h = Sha256::new();
    h.update(segment_id.to_le_bytes());
    for v in [offset, prefix_len, suffix_len] {
        h.update((v as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub offsets: Vec<usize>,
    pub prefix_lens: Vec<usize>,
    pub suffix_lens: Vec<usize>,
    /// Segments probed per bucket; `None` probes all of them.
    #[serde(default)]
    pub per_bucket_limit: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        ProbeGrid {
            offsets: DEFAULT_OFFSETS.to_vec(),
            prefix_lens: DEFAULT_PREFIX_LENS.to_vec(),
            suffix_lens: vec![DEFAULT_SUFFIX_LEN],
            per_bucket_limit: None,
            seed: 0,
        }
    }
}

impl ProbeGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("offsets", &self.offsets),
            ("prefix lengths", &self.prefix_lens),
            ("suffix lengths", &self.suffix_lens),
        ] {
            if v.is_empty() {
                return Err(Error::Config(format!("probe grid has no {name}")));
            }
        }
        if self.prefix_lens.contains(&0) || self.suffix_lens.contains(&0) {
            return Err(Error::Config("prefix and suffix lengths must be at least 1".into()));
        }
        Ok(())
    }

    pub fn points(&self) -> usize {
        self.offsets.len() * self.prefix_lens.len() * self.suffix_lens.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GridOutcome {
    pub specs: Vec<ProbeSpec>,
    /// Grid points dropped because they overrun the context window.
    pub skipped: usize,
    pub segments: usize,
}

/// Cartesian product of the grid over the selected bucket segments, minus
/// the points that do not fit. Sorted by probe id.
pub fn probe_grid(manifest: &CorpusManifest, grid: &ProbeGrid) -> Result<GridOutcome> {
    grid.validate()?;
    let base = manifest.probe_base();
    let mut out = GridOutcome::default();
    for (bi, bucket) in manifest.buckets.iter().enumerate() {
        let chosen = match grid.per_bucket_limit {
            Some(limit) if limit < bucket.segment_ids.len() => {
                let mut ids = DetRng::derived(grid.seed, &[STREAM_PROBE_SAMPLE, bi as u64]).sample(&bucket.segment_ids, limit);
                ids.sort_unstable();
                ids
            }
            _ => bucket.segment_ids.clone(),
        };
        out.segments += chosen.len();
        for &segment_id in &chosen {
            for &o in &grid.offsets {
                for &n in &grid.prefix_lens {
                    for &m in &grid.suffix_lens {
                        let spec = ProbeSpec::new(segment_id, o, n, m, base, bucket.frequency);
                        if spec.fits(manifest.context_len) {
                            out.specs.push(spec);
                        } else {
                            out.skipped += 1;
                        }
                    }
                }
            }
        }
    }
    out.specs.sort_by(|a, b| a.probe_id.cmp(&b.probe_id));
    Ok(out)
}

/// `x = tokens[base+o .. base+o+n)`, `s = tokens[base+o+n .. base+o+n+m)`.
pub fn extract_probe(segment: &Segment, spec: &ProbeSpec) -> Result<ProbeRecord> {
    if segment.segment_id != spec.segment_id {
        return Err(Error::Invalid(format!(
            "probe {} targets segment {} but got segment {}",
            spec.probe_id, spec.segment_id, segment.segment_id
        )));
    }
    if spec.base < 1 || !spec.fits(segment.tokens.len()) {
        return Err(Error::Invalid(format!(
            "probe {} (base {}, offset {}, prefix {}, suffix {}) does not fit a {}-token segment",
            spec.probe_id,
            spec.base,
            spec.offset,
            spec.prefix_len,
            spec.suffix_len,
            segment.tokens.len()
        )));
    }
    let start = spec.prefix_start();
    let mid = start + spec.prefix_len;
    Ok(ProbeRecord {
        probe_id: spec.probe_id.clone(),
        segment_id: spec.segment_id,
        offset: spec.offset,
        prefix_len: spec.prefix_len,
        suffix_len: spec.suffix_len,
        base: spec.base,
        bucket_frequency: spec.bucket_frequency,
        prefix: segment.tokens[start..mid].to_vec(),
        true_suffix: segment.tokens[mid..spec.end()].to_vec(),
    })
}

/// Extract every spec against the segment training actually saw. For
/// swapped manifests that is the first materialized occurrence; segments
/// that are never scheduled are read from the store.
pub fn build_probes(manifest: &CorpusManifest, store: &SegmentStore, specs: &[ProbeSpec]) -> Result<Vec<ProbeRecord>> {
    let materializer = Materializer::new(manifest, store)?;
    let mut first: HashMap<SegmentId, usize> = HashMap::new();
    for (i, e) in manifest.schedule.iter().enumerate() {
        first.entry(e.segment_id).or_insert(i);
    }
    let mut wanted: Vec<SegmentId> = specs.iter().map(|s| s.segment_id).collect();
    wanted.sort_unstable();
    wanted.dedup();
    let segments: HashMap<SegmentId, Segment> = wanted
        .par_iter()
        .map(|&id| {
            let seg = match first.get(&id) {
                Some(&i) => materializer.materialize(&manifest.schedule[i])?,
                None => store.require(id)?.clone(),
            };
            Ok((id, seg))
        })
        .collect::<Result<_>>()?;

    let mut records = specs
        .par_iter()
        .map(|spec| extract_probe(&segments[&spec.segment_id], spec))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.probe_id.cmp(&b.probe_id));
    Ok(records)
}

pub fn emit_probes(manifest: &CorpusManifest, store: &SegmentStore, specs: &[ProbeSpec], out: &Path) -> Result<Vec<ProbeRecord>> {
    let records = build_probes(manifest, store, specs)?;
    write_jsonl(out, &records)?;
    Ok(records)
}

/// Read a probes file, checking each record's lengths and id.
pub fn read_probes(path: &Path) -> Result<Vec<ProbeRecord>> {
    let records: Vec<ProbeRecord> = read_jsonl(path)?;
    for r in &records {
        if r.prefix.len() != r.prefix_len || r.true_suffix.len() != r.suffix_len {
            return Err(Error::Invalid(format!(
                "{}: probe {} has prefix/suffix lengths {}/{} but declares {}/{}",
                path.display(),
                r.probe_id,
                r.prefix.len(),
                r.true_suffix.len(),
                r.prefix_len,
                r.suffix_len
            )));
        }
        if r.probe_id != probe_id(r.segment_id, r.offset, r.prefix_len, r.suffix_len) {
            return Err(Error::Invalid(format!("{}: probe id {} does not match its coordinates", path.display(), r.probe_id)));
        }
    }
    Ok(records)
}
