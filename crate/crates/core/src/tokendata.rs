//! Token-level data model and the on-disk segment store.
//!
//! A segment store is a fixed 28-byte header followed by a flat payload of
//! little-endian `u32` token ids, `segment_count * context_len` of them, in
//! segment-id order:
//!
//! | bytes  | field          |
//! |--------|----------------|
//! | 0..8   | magic `MTRACE01` |
//! | 8..12  | vocab_size u32 |
//! | 12..16 | context_len u32 |
//! | 16..20 | bod_id u32     |
//! | 20..28 | segment_count u64 |
//!
//! Provenance (segment id, source document, span) lives in a JSON sidecar at
//! `<path>.meta.json`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, ErrorKind, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_string;
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, sibling};

pub type TokenId = u32;
pub type SegmentId = u64;

pub const MAGIC: &[u8; 8] = b"MTRACE01";
pub const HEADER_LEN: usize = 28;

/// Number of ids reserved ahead of byte values in the fallback vocabulary.
pub const RESERVED_IDS: u32 = 16;
/// Beginning-of-document id in the fallback vocabulary.
pub const BOD_ID: TokenId = 0;
pub const BYTE_VOCAB_SIZE: u32 = RESERVED_IDS + 256;
pub const DEFAULT_CONTEXT_LEN: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Gutenberg,
    Fineweb,
    Synthetic,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Gutenberg, Source::Fineweb, Source::Synthetic];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Gutenberg => "gutenberg",
            Source::Fineweb => "fineweb",
            Source::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gutenberg" => Ok(Source::Gutenberg),
            "fineweb" => Ok(Source::Fineweb),
            "synthetic" => Ok(Source::Synthetic),
            other => Err(Error::Invalid(format!("unknown document source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub source: Source,
    pub tokens: Vec<TokenId>,
}

/// One context-window-sized training unit: `[bod] + payload`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub segment_id: SegmentId,
    pub tokens: Vec<TokenId>,
    pub source_doc: String,
    pub source: Source,
    /// Half-open token range of the payload within the source document.
    pub source_span: (usize, usize),
}

impl Segment {
    /// Tokens after the leading BOD.
    pub fn payload(&self) -> &[TokenId] {
        &self.tokens[1..]
    }
}

/// Parameters every segment in a store shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreLayout {
    pub vocab_size: u32,
    pub context_len: usize,
    pub bod_id: TokenId,
}

impl StoreLayout {
    pub fn byte_fallback(context_len: usize) -> Self {
        StoreLayout {
            vocab_size: BYTE_VOCAB_SIZE,
            context_len,
            bod_id: BOD_ID,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len < 2 {
            return Err(Error::Invalid(format!(
                "context_len must be at least 2, got {}",
                self.context_len
            )));
        }
        if self.context_len > u32::MAX as usize {
            return Err(Error::Invalid("context_len does not fit in u32".into()));
        }
        if self.bod_id >= self.vocab_size {
            return Err(Error::Invalid(format!(
                "bod_id {} must be below vocab_size {}",
                self.bod_id, self.vocab_size
            )));
        }
        Ok(())
    }

    /// Check one segment against the store invariants.
    pub fn check_segment(&self, seg: &Segment) -> Result<()> {
        let bad = |reason: String| Error::InvalidSegment {
            segment_id: seg.segment_id,
            reason,
        };
        if seg.tokens.len() != self.context_len {
            return Err(bad(format!(
                "length {} != context_len {}",
                seg.tokens.len(),
                self.context_len
            )));
        }
        if seg.tokens[0] != self.bod_id {
            return Err(bad(format!(
                "first token {} is not BOD {}",
                seg.tokens[0], self.bod_id
            )));
        }
        let (start, end) = seg.source_span;
        if end < start || end - start != self.context_len - 1 {
            return Err(bad(format!(
                "source span {start}..{end} does not cover context_len - 1 tokens"
            )));
        }
        if let Some((pos, &tok)) = seg
            .tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t >= self.vocab_size)
        {
            return Err(bad(format!(
                "token {tok} at position {pos} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub vocab_size: u32,
    pub context_len: u32,
    pub bod_id: u32,
    pub segment_count: u64,
}

impl StoreHeader {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[0..8].copy_from_slice(MAGIC);
        buf[8..12].copy_from_slice(&self.vocab_size.to_le_bytes());
        buf[12..16].copy_from_slice(&self.context_len.to_le_bytes());
        buf[16..20].copy_from_slice(&self.bod_id.to_le_bytes());
        buf[20..28].copy_from_slice(&self.segment_count.to_le_bytes());
        buf
    }

    pub fn layout(&self) -> StoreLayout {
        StoreLayout {
            vocab_size: self.vocab_size,
            context_len: self.context_len as usize,
            bod_id: self.bod_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SidecarEntry {
    segment_id: SegmentId,
    source_doc: String,
    source: Source,
    source_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Sidecar {
    vocab_size: u32,
    context_len: usize,
    bod_id: TokenId,
    segments: Vec<SidecarEntry>,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    sibling(path, ".meta.json")
}

/// Write `segments` (sorted by id) to a segment store plus its sidecar.
///
/// Every segment is validated before anything touches the disk.
pub fn write_segments(path: &Path, layout: StoreLayout, segments: &[Segment]) -> Result<StoreHeader> {
    layout.validate()?;
    let mut seen = HashSet::with_capacity(segments.len());
    for seg in segments {
        layout.check_segment(seg)?;
        if !seen.insert(seg.segment_id) {
            return Err(Error::DuplicateSegment(seg.segment_id));
        }
    }
    let mut ordered: Vec<&Segment> = segments.iter().collect();
    ordered.sort_by_key(|s| s.segment_id);

    let header = StoreHeader {
        vocab_size: layout.vocab_size,
        context_len: layout.context_len as u32,
        bod_id: layout.bod_id,
        segment_count: ordered.len() as u64,
    };
    atomic_write(path, |w| {
        w.write_all(&header.encode()).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::with_capacity(layout.context_len * 4);
        for seg in &ordered {
            buf.clear();
            for t in &seg.tokens {
                buf.extend_from_slice(&t.to_le_bytes());
            }
            w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })?;

    let sidecar = Sidecar {
        vocab_size: layout.vocab_size,
        context_len: layout.context_len,
        bod_id: layout.bod_id,
        segments: ordered
            .iter()
            .map(|s| SidecarEntry {
                segment_id: s.segment_id,
                source_doc: s.source_doc.clone(),
                source: s.source,
                source_span: s.source_span,
            })
            .collect(),
    };
    let meta = sidecar_path(path);
    let text = to_canonical_string(&sidecar).map_err(|e| Error::json("segment sidecar", e))?;
    atomic_write(&meta, |w| {
        w.write_all(text.as_bytes()).map_err(|e| Error::io(&meta, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(&meta, e))
    })?;
    Ok(header)
}

/// Read only the header of a segment store.
pub fn read_header(path: &Path) -> Result<StoreHeader> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header_from(&mut file, path)
}

fn read_header_from(r: &mut impl Read, path: &Path) -> Result<StoreHeader> {
    let mut buf = [0u8; HEADER_LEN];
    match r.read_exact(&mut buf) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Err(Error::BadMagic(path.into())),
        Err(e) => return Err(Error::io(path, e)),
    }
    if &buf[0..8] != MAGIC {
        return Err(Error::BadMagic(path.into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
    let header = StoreHeader {
        vocab_size: u32_at(8),
        context_len: u32_at(12),
        bod_id: u32_at(16),
        segment_count: u64::from_le_bytes(buf[20..28].try_into().unwrap()),
    };
    header.layout().validate()?;
    Ok(header)
}

/// A loaded segment store with id lookup.
#[derive(Debug, Clone)]
pub struct SegmentStore {
    pub header: StoreHeader,
    pub segments: Vec<Segment>,
    by_id: HashMap<SegmentId, usize>,
}

impl SegmentStore {
    pub fn new(layout: StoreLayout, segments: Vec<Segment>) -> Result<Self> {
        layout.validate()?;
        let mut by_id = HashMap::with_capacity(segments.len());
        for (i, seg) in segments.iter().enumerate() {
            layout.check_segment(seg)?;
            if by_id.insert(seg.segment_id, i).is_some() {
                return Err(Error::DuplicateSegment(seg.segment_id));
            }
        }
        Ok(SegmentStore {
            header: StoreHeader {
                vocab_size: layout.vocab_size,
                context_len: layout.context_len as u32,
                bod_id: layout.bod_id,
                segment_count: segments.len() as u64,
            },
            segments,
            by_id,
        })
    }

    pub fn layout(&self) -> StoreLayout {
        self.header.layout()
    }

    pub fn get(&self, id: SegmentId) -> Option<&Segment> {
        self.by_id.get(&id).map(|&i| &self.segments[i])
    }

    pub fn require(&self, id: SegmentId) -> Result<&Segment> {
        self.get(id).ok_or(Error::UnknownSegment(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = SegmentId> + '_ {
        self.segments.iter().map(|s| s.segment_id)
    }

    pub fn ids_from(&self, sources: &[Source]) -> Vec<SegmentId> {
        self.segments
            .iter()
            .filter(|s| sources.contains(&s.source))
            .map(|s| s.segment_id)
            .collect()
    }
}

/// Read a segment store and its sidecar.
pub fn read_segments(path: &Path) -> Result<SegmentStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header_from(&mut r, path)?;
    let layout = header.layout();

    let meta_path = sidecar_path(path);
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&meta_text)
        .map_err(|e| Error::json(meta_path.display().to_string(), e))?;
    if sidecar.segments.len() as u64 != header.segment_count
        || sidecar.context_len != layout.context_len
        || sidecar.vocab_size != layout.vocab_size
        || sidecar.bod_id != layout.bod_id
    {
        return Err(Error::Invalid(format!(
            "{} does not describe {}",
            meta_path.display(),
            path.display()
        )));
    }

    let ctx = layout.context_len;
    let mut buf = vec![0u8; ctx * 4];
    let mut segments = Vec::with_capacity(sidecar.segments.len());
    for (k, entry) in sidecar.segments.into_iter().enumerate() {
        match r.read_exact(&mut buf) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => {
                return Err(Error::Truncated {
                    segment_index: k as u64,
                })
            }
            Err(e) => return Err(Error::io(path, e)),
        }
        let mut tokens = Vec::with_capacity(ctx);
        for (pos, chunk) in buf.chunks_exact(4).enumerate() {
            let tok = u32::from_le_bytes(chunk.try_into().unwrap());
            if tok >= layout.vocab_size {
                return Err(Error::TokenOutOfRange {
                    segment_index: k as u64,
                    position: pos,
                    token: tok,
                    vocab_size: layout.vocab_size,
                });
            }
            tokens.push(tok);
        }
        segments.push(Segment {
            segment_id: entry.segment_id,
            tokens,
            source_doc: entry.source_doc,
            source: entry.source,
            source_span: entry.source_span,
        });
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Invalid(format!("{}: trailing bytes after payload", path.display()))),
        Err(e) => return Err(Error::io(path, e)),
    }
    SegmentStore::new(layout, segments)
}

/// Fallback tokenizer: one token per UTF-8 byte, shifted past the reserved ids.
pub fn byte_tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(|b| u32::from(b) + RESERVED_IDS).collect()
}

/// Inverse of [`byte_tokenize`]. Fails on reserved ids or invalid UTF-8.
pub fn byte_detokenize(tokens: &[TokenId]) -> Result<String> {
    let bytes = tokens
        .iter()
        .map(|&t| {
            if (RESERVED_IDS..BYTE_VOCAB_SIZE).contains(&t) {
                Ok((t - RESERVED_IDS) as u8)
            } else {
                Err(Error::Invalid(format!("token {t} is not a byte token")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(format!("detokenized bytes are not UTF-8: {e}")))
}

/// One line of the document ingestion JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocumentLine {
    pub doc_id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Result of ingesting a document file.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub documents: Vec<Document>,
    /// True when any document was tokenized with the byte fallback.
    pub used_byte_fallback: bool,
}

impl DocumentLine {
    fn into_document(self, used_fallback: &mut bool) -> Result<Document> {
        let source: Source = self.source.parse()?;
        let tokens = match (self.tokens, self.text) {
            (Some(toks), _) => toks
                .into_iter()
                .map(|t| {
                    u32::try_from(t).map_err(|_| {
                        Error::Invalid(format!("document {}: token {t} is not a u32", self.doc_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            (None, Some(text)) => {
                *used_fallback = true;
                byte_tokenize(&text)
            }
            (None, None) => {
                return Err(Error::Invalid(format!(
                    "document {} has neither `tokens` nor `text`",
                    self.doc_id
                )))
            }
        };
        if tokens.is_empty() {
            return Err(Error::Invalid(format!("document {} is empty", self.doc_id)));
        }
        Ok(Document {
            doc_id: self.doc_id,
            source,
            tokens,
        })
    }
}

/// Parse the document ingestion JSONL format.
pub fn read_documents(path: &Path) -> Result<Ingested> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut used_byte_fallback = false;
    let mut seen = HashSet::new();
    let mut documents = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{}:{}", path.display(), lineno + 1);
        let raw: DocumentLine = serde_json::from_str(line).map_err(|e| Error::json(ctx(), e))?;
        let doc = raw
            .into_document(&mut used_byte_fallback)
            .map_err(|e| Error::Invalid(format!("{}: {e}", ctx())))?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::Invalid(format!("{}: duplicate doc_id {}", ctx(), doc.doc_id)));
        }
        documents.push(doc);
    }
    Ok(Ingested {
        documents,
        used_byte_fallback,
    })
}

/// Write documents as pre-tokenized ingestion JSONL.
pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    let lines: Vec<DocumentLine> = docs
        .iter()
        .map(|d| DocumentLine {
            doc_id: d.doc_id.clone(),
            source: d.source.to_string(),
            tokens: Some(d.tokens.iter().map(|&t| i64::from(t)).collect()),
            text: None,
        })
        .collect();
    crate::fsutil::write_jsonl(path, &lines)
}
