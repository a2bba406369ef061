//! Training-corpus schedules: dense multi-epoch, sparse frequency buckets,
//! and swapped-prefix buckets, plus the goldfish loss mask.
//!
//! A [`CorpusManifest`] is the complete occurrence schedule of one scenario.
//! It never stores tokens; occurrences are turned into concrete segments by
//! [`Materializer`].

mod builders;
mod goldfish;
mod manifest_io;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tokendata::{Segment, SegmentId, SegmentStore, StoreLayout, TokenId};

pub use builders::{build_dense, build_sparse, build_swapped, MixSpec};
pub use goldfish::{goldfish_mask, goldfish_mask_parallel, window_hash, GoldfishMask};
pub use manifest_io::{manifest_json, read_manifest, schedule_path, write_manifest, SCHEDULE_INLINE_LIMIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Dense,
    Sparse,
    Swapped,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Dense => "dense",
            Scenario::Sparse => "sparse",
            Scenario::Swapped => "swapped",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Scenario::Dense),
            "sparse" => Ok(Scenario::Sparse),
            "swapped" => Ok(Scenario::Swapped),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Requested bucket: `count` segments each scheduled `frequency` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketDef {
    pub frequency: u32,
    pub count: usize,
}

impl FromStr for BucketDef {
    type Err = Error;

    /// Parses `frequency:count`, e.g. `128:500`.
    fn from_str(s: &str) -> Result<Self> {
        let (f, c) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bucket `{s}` is not of the form frequency:count")))?;
        let frequency = f
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad bucket frequency in `{s}`")))?;
        let count = c
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad bucket count in `{s}`")))?;
        Ok(BucketDef { frequency, count })
    }
}

/// Powers of two `1..=max` as bucket definitions with `count` segments each.
pub fn power_of_two_buckets(max_frequency: u32, count: usize) -> Vec<BucketDef> {
    std::iter::successors(Some(1u32), |f| f.checked_mul(2))
        .take_while(|&f| f <= max_frequency)
        .map(|frequency| BucketDef { frequency, count })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSpec {
    pub label: String,
    pub frequency: u32,
    pub segment_ids: Vec<SegmentId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub occurrence_index: u64,
    pub segment_id: SegmentId,
    /// Nonzero only for swapped bucket occurrences; selects the donor run.
    pub variant_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub target_tokens: u64,
    pub filler_tokens: u64,
    pub fraction: f64,
}

impl TokenTotals {
    fn from_counts(target_occurrences: u64, filler_occurrences: u64, context_len: usize) -> Self {
        let total = target_occurrences + filler_occurrences;
        TokenTotals {
            target_tokens: target_occurrences * context_len as u64,
            filler_tokens: filler_occurrences * context_len as u64,
            fraction: if total == 0 {
                0.0
            } else {
                target_occurrences as f64 / total as f64
            },
        }
    }
}

/// Segment geometry shared by a manifest and its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub context_len: usize,
    pub bod_id: TokenId,
}

impl From<StoreLayout> for Layout {
    fn from(l: StoreLayout) -> Self {
        Layout {
            context_len: l.context_len,
            bod_id: l.bod_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub scenario: Scenario,
    pub seed: u64,
    pub context_len: usize,
    pub bod_id: TokenId,
    pub buckets: Vec<BucketSpec>,
    pub filler_segment_ids: Vec<SegmentId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub donor_segment_ids: Vec<SegmentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap_len: Option<usize>,
    /// Length of the unswapped tail, `context_len - 1 - swap_len`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
    /// Recommended checkpoints: powers of two plus the final epoch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoint_epochs: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_spacing: Option<u64>,
    pub token_totals: TokenTotals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size_tokens: Option<u64>,
    #[serde(skip)]
    pub schedule: Vec<ScheduleEntry>,
}

impl CorpusManifest {
    pub fn layout(&self) -> Layout {
        Layout {
            context_len: self.context_len,
            bod_id: self.bod_id,
        }
    }

    /// First payload position probes are measured from: 1 after BOD, or the
    /// start of the retained part for swapped scenarios.
    pub fn probe_base(&self) -> usize {
        match self.scenario {
            Scenario::Swapped => 1 + self.swap_len.unwrap_or(0),
            _ => 1,
        }
    }

    pub fn bucket_of(&self, segment_id: SegmentId) -> Option<&BucketSpec> {
        self.buckets.iter().find(|b| b.segment_ids.contains(&segment_id))
    }

    /// `segment_id -> frequency` for every bucket segment.
    pub fn frequency_map(&self) -> HashMap<SegmentId, u32> {
        self.buckets
            .iter()
            .flat_map(|b| b.segment_ids.iter().map(move |&s| (s, b.frequency)))
            .collect()
    }

    /// Occurrence count of every scheduled segment.
    pub fn occurrence_counts(&self) -> HashMap<SegmentId, u64> {
        let mut counts = HashMap::new();
        for e in &self.schedule {
            *counts.entry(e.segment_id).or_insert(0) += 1;
        }
        counts
    }

    /// Full-scan check of the frequency accounting invariants.
    pub fn verify_accounting(&self) -> Result<()> {
        let counts = self.occurrence_counts();
        for (i, e) in self.schedule.iter().enumerate() {
            if e.occurrence_index != i as u64 {
                return Err(Error::Invalid(format!(
                    "schedule entry {i} has occurrence_index {}",
                    e.occurrence_index
                )));
            }
        }
        let mut listed = HashMap::new();
        for b in &self.buckets {
            for &s in &b.segment_ids {
                if listed.insert(s, b.frequency).is_some() {
                    return Err(Error::DuplicateSegment(s));
                }
                let got = counts.get(&s).copied().unwrap_or(0);
                if got != u64::from(b.frequency) {
                    return Err(Error::Invalid(format!(
                        "segment {s} in bucket {} occurs {got} times",
                        b.label
                    )));
                }
            }
        }
        for &s in &self.filler_segment_ids {
            if listed.insert(s, 1).is_some() {
                return Err(Error::DuplicateSegment(s));
            }
            let got = counts.get(&s).copied().unwrap_or(0);
            if got != 1 {
                return Err(Error::Invalid(format!("filler segment {s} occurs {got} times")));
            }
        }
        if let Some((&s, _)) = counts.iter().find(|(s, _)| !listed.contains_key(s)) {
            return Err(Error::Invalid(format!("scheduled segment {s} is in no bucket or filler list")));
        }
        let target: u64 = self
            .buckets
            .iter()
            .map(|b| u64::from(b.frequency) * b.segment_ids.len() as u64)
            .sum();
        let expected = TokenTotals::from_counts(target, self.filler_segment_ids.len() as u64, self.context_len);
        if expected.target_tokens != self.token_totals.target_tokens
            || expected.filler_tokens != self.token_totals.filler_tokens
        {
            return Err(Error::Invalid("token totals disagree with buckets".into()));
        }
        Ok(())
    }
}

/// Turns schedule entries into concrete segments.
pub struct Materializer<'a> {
    manifest: &'a CorpusManifest,
    store: &'a SegmentStore,
    bucketed: HashMap<SegmentId, u32>,
}

impl<'a> Materializer<'a> {
    pub fn new(manifest: &'a CorpusManifest, store: &'a SegmentStore) -> Result<Self> {
        if store.layout().context_len != manifest.context_len || store.layout().bod_id != manifest.bod_id {
            return Err(Error::Invalid(format!(
                "segment store layout (context_len {}, bod {}) does not match manifest (context_len {}, bod {})",
                store.layout().context_len,
                store.layout().bod_id,
                manifest.context_len,
                manifest.bod_id
            )));
        }
        Ok(Materializer {
            manifest,
            store,
            bucketed: manifest.frequency_map(),
        })
    }

    /// The segment that training sees for `entry`.
    pub fn materialize(&self, entry: &ScheduleEntry) -> Result<Segment> {
        let idx = entry.occurrence_index as usize;
        if self.manifest.schedule.get(idx) != Some(entry) {
            return Err(Error::Invalid(format!(
                "entry {} is not part of this manifest's schedule",
                entry.occurrence_index
            )));
        }
        let target = self.store.require(entry.segment_id)?;
        if self.manifest.scenario != Scenario::Swapped || !self.bucketed.contains_key(&entry.segment_id) {
            return Ok(target.clone());
        }
        let swap_len = self
            .manifest
            .swap_len
            .ok_or_else(|| Error::Invalid("swapped manifest without swap_len".into()))?;
        let donor_run = self.donor_run(entry.segment_id, entry.variant_seed, swap_len)?;
        let mut tokens = Vec::with_capacity(self.manifest.context_len);
        tokens.push(self.manifest.bod_id);
        tokens.extend_from_slice(donor_run);
        tokens.extend_from_slice(&target.tokens[1 + swap_len..]);
        debug_assert_eq!(tokens.len(), self.manifest.context_len);
        Ok(Segment {
            tokens,
            ..target.clone()
        })
    }

    /// The contiguous donor tokens placed ahead of the retained part.
    fn donor_run(&self, target: SegmentId, variant_seed: u64, swap_len: usize) -> Result<&'a [TokenId]> {
        let donors = &self.manifest.donor_segment_ids;
        if !donors.iter().any(|&d| d != target) {
            return Err(Error::InsufficientPool(format!("no donor available for segment {target}")));
        }
        let mut rng = DetRng::derived(variant_seed, &[builders::STREAM_DONOR]);
        let donor = loop {
            let d = donors[rng.index(donors.len())];
            if d != target {
                break d;
            }
        };
        let donor_seg = self.store.require(donor)?;
        let ctx = self.manifest.context_len;
        let start = 1 + rng.index(ctx - swap_len);
        Ok(&donor_seg.tokens[start..start + swap_len])
    }
}

/// Convenience wrapper around [`Materializer`] for a single entry.
pub fn materialize(manifest: &CorpusManifest, store: &SegmentStore, entry: &ScheduleEntry) -> Result<Segment> {
    Materializer::new(manifest, store)?.materialize(entry)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_def_parses() {
        let b: BucketDef = "128:500".parse().unwrap();
        assert_eq!(b, BucketDef { frequency: 128, count: 500 });
        assert!("128".parse::<BucketDef>().is_err());
        assert!("x:1".parse::<BucketDef>().is_err());
    }

    #[test]
    fn power_of_two_grid() {
        let freqs: Vec<u32> = power_of_two_buckets(128, 500).iter().map(|b| b.frequency).collect();
        assert_eq!(freqs, vec![1, 2, 4, 8, 16, 32, 64, 128]);
        assert_eq!(power_of_two_buckets(256, 1).len(), 9);
    }
}
