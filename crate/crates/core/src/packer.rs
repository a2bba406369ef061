//! Chunk documents into fixed-length, BOD-prefixed segments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokendata::{Document, Segment, Source, TokenId, BOD_ID, DEFAULT_CONTEXT_LEN};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackPolicy {
    pub context_len: usize,
    pub bod_id: TokenId,
    /// Let a segment continue into the next document instead of dropping
    /// the remainder.
    pub span_documents: bool,
    /// Cap on segments taken from one document (ignored when spanning).
    pub max_segments_per_doc: Option<usize>,
}

impl Default for PackPolicy {
    fn default() -> Self {
        PackPolicy {
            context_len: DEFAULT_CONTEXT_LEN,
            bod_id: BOD_ID,
            span_documents: false,
            max_segments_per_doc: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceStats {
    pub documents: u64,
    pub segments: u64,
    pub consumed: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackStats {
    pub segments: u64,
    pub consumed: u64,
    pub dropped: u64,
    pub per_source: BTreeMap<Source, SourceStats>,
}

impl PackStats {
    pub fn total_tokens(&self) -> u64 {
        self.consumed + self.dropped
    }
}

/// Pack documents and report token accounting in one pass.
pub fn pack(docs: &[Document], policy: &PackPolicy) -> Result<(Vec<Segment>, PackStats)> {
    if policy.context_len < 2 {
        return Err(Error::Invalid(format!(
            "context_len must be at least 2, got {}",
            policy.context_len
        )));
    }
    let mut stats = PackStats::default();
    for d in docs {
        stats.per_source.entry(d.source).or_default().documents += 1;
    }
    let segments = if policy.span_documents {
        pack_spanning(docs, policy, &mut stats)
    } else {
        pack_per_document(docs, policy, &mut stats)
    };
    stats.segments = segments.len() as u64;
    Ok((segments, stats))
}

pub fn pack_documents(docs: &[Document], policy: &PackPolicy) -> Result<Vec<Segment>> {
    pack(docs, policy).map(|(s, _)| s)
}

pub fn pack_report(docs: &[Document], policy: &PackPolicy) -> Result<PackStats> {
    pack(docs, policy).map(|(_, s)| s)
}

fn make_segment(policy: &PackPolicy, payload: &[TokenId]) -> Vec<TokenId> {
    debug_assert_eq!(payload.len(), policy.context_len - 1);
    let mut tokens = Vec::with_capacity(policy.context_len);
    tokens.push(policy.bod_id);
    tokens.extend_from_slice(payload);
    tokens
}

fn pack_per_document(docs: &[Document], policy: &PackPolicy, stats: &mut PackStats) -> Vec<Segment> {
    let payload_len = policy.context_len - 1;
    let mut out = Vec::new();
    for doc in docs {
        let mut n_chunks = doc.tokens.len() / payload_len;
        if let Some(cap) = policy.max_segments_per_doc {
            n_chunks = n_chunks.min(cap);
        }
        for c in 0..n_chunks {
            let start = c * payload_len;
            let id = out.len() as u64;
            out.push(Segment {
                segment_id: id,
                tokens: make_segment(policy, &doc.tokens[start..start + payload_len]),
                source_doc: doc.doc_id.clone(),
                source: doc.source,
                source_span: (start, start + payload_len),
            });
        }
        let consumed = (n_chunks * payload_len) as u64;
        let dropped = doc.tokens.len() as u64 - consumed;
        let s = stats.per_source.entry(doc.source).or_default();
        s.segments += n_chunks as u64;
        s.consumed += consumed;
        s.dropped += dropped;
        stats.consumed += consumed;
        stats.dropped += dropped;
    }
    out
}

/// Spanning mode: documents are concatenated in input order. A segment that
/// crosses a boundary names every contributing document joined by `+`, takes
/// the source of its first document, and its span indexes into the
/// concatenation of the contributing documents.
fn pack_spanning(docs: &[Document], policy: &PackPolicy, stats: &mut PackStats) -> Vec<Segment> {
    let payload_len = policy.context_len - 1;
    let mut out = Vec::new();
    let mut buf: Vec<TokenId> = Vec::with_capacity(payload_len);
    // (doc index, tokens contributed to the pending segment)
    let mut parts: Vec<(usize, usize)> = Vec::new();
    let mut start_in_first = 0usize;

    for (di, doc) in docs.iter().enumerate() {
        let mut pos = 0;
        while pos < doc.tokens.len() {
            if buf.is_empty() {
                start_in_first = pos;
            }
            let take = (payload_len - buf.len()).min(doc.tokens.len() - pos);
            buf.extend_from_slice(&doc.tokens[pos..pos + take]);
            parts.push((di, take));
            pos += take;
            if buf.len() == payload_len {
                let id = out.len() as u64;
                let first = &docs[parts[0].0];
                let names: Vec<&str> = parts.iter().map(|&(i, _)| docs[i].doc_id.as_str()).collect();
                out.push(Segment {
                    segment_id: id,
                    tokens: make_segment(policy, &buf),
                    source_doc: names.join("+"),
                    source: first.source,
                    source_span: (start_in_first, start_in_first + payload_len),
                });
                for &(i, n) in &parts {
                    let s = stats.per_source.entry(docs[i].source).or_default();
                    s.consumed += n as u64;
                }
                stats.per_source.entry(first.source).or_default().segments += 1;
                stats.consumed += payload_len as u64;
                buf.clear();
                parts.clear();
            }
        }
    }
    for &(i, n) in &parts {
        stats.per_source.entry(docs[i].source).or_default().dropped += n as u64;
        stats.dropped += n as u64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, n: usize, source: Source) -> Document {
        Document {
            doc_id: id.into(),
            source,
            tokens: (0..n).map(|i| 16 + (i % 256) as u32).collect(),
        }
    }

    fn policy(ctx: usize) -> PackPolicy {
        PackPolicy {
            context_len: ctx,
            ..PackPolicy::default()
        }
    }

    #[test]
    fn exact_two_segments() {
        let docs = [doc("a", 16_382, Source::Gutenberg)];
        let (segs, stats) = pack(&docs, &policy(8192)).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!((stats.consumed, stats.dropped), (16_382, 0));
        assert_eq!(segs[1].source_span, (8191, 16_382));
        assert_eq!(&segs[1].tokens[1..], &docs[0].tokens[8191..]);
    }

    #[test]
    fn boundary_and_below_threshold() {
        let (segs, stats) = pack(&[doc("a", 8191, Source::Gutenberg)], &policy(8192)).unwrap();
        assert_eq!((segs.len(), stats.dropped), (1, 0));
        let (segs, stats) = pack(&[doc("a", 100, Source::Gutenberg)], &policy(8192)).unwrap();
        assert_eq!((segs.len(), stats.dropped), (0, 100));
    }

    #[test]
    fn report_counts() {
        assert_eq!(pack_report(&[], &policy(8192)).unwrap(), PackStats::default());
        let docs: Vec<_> = ["a", "b", "c"].iter().map(|n| doc(n, 5000, Source::Gutenberg)).collect();
        let stats = pack_report(&docs, &policy(4001)).unwrap();
        assert_eq!((stats.segments, stats.consumed, stats.dropped), (3, 12_000, 3_000));
        let g = &stats.per_source[&Source::Gutenberg];
        assert_eq!((g.documents, g.segments), (3, 3));
    }

    #[test]
    fn segment_cap_counts_as_dropped() {
        let p = PackPolicy {
            max_segments_per_doc: Some(1),
            ..policy(11)
        };
        let (segs, stats) = pack(&[doc("a", 35, Source::Fineweb)], &p).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!((stats.consumed, stats.dropped), (10, 25));
    }

    #[test]
    fn spanning_crosses_documents() {
        let p = PackPolicy {
            span_documents: true,
            ..policy(11)
        };
        let docs = [doc("a", 6, Source::Gutenberg), doc("b", 9, Source::Fineweb)];
        let (segs, stats) = pack(&docs, &p).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].source_doc, "a+b");
        assert_eq!(stats.consumed + stats.dropped, 15);
        assert_eq!(stats.per_source[&Source::Gutenberg].consumed, 6);
        assert_eq!(stats.per_source[&Source::Fineweb].consumed, 4);
        assert_eq!(stats.per_source[&Source::Fineweb].dropped, 5);
    }

    #[test]
    fn rejects_tiny_context() {
        assert!(pack(&[], &policy(1)).is_err());
    }
}
