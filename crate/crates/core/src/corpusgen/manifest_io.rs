use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::{CorpusManifest, ScheduleEntry};
use crate::canonical::to_canonical_string;
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, sibling};

/// Longer schedules go to a binary sibling file instead of the JSON body.
pub const SCHEDULE_INLINE_LIMIT: usize = 10_000;

const ENTRY_BYTES: usize = 16;

/// `<manifest>.schedule.bin`: little-endian `(u64 segment_id, u64 variant_seed)`
/// pairs in occurrence order.
pub fn schedule_path(manifest_path: &Path) -> PathBuf {
    sibling(manifest_path, ".schedule.bin")
}

fn encode_schedule(schedule: &[ScheduleEntry]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(schedule.len() * ENTRY_BYTES);
    for e in schedule {
        buf.extend_from_slice(&e.segment_id.to_le_bytes());
        buf.extend_from_slice(&e.variant_seed.to_le_bytes());
    }
    buf
}

fn decode_schedule(bytes: &[u8]) -> Result<Vec<ScheduleEntry>> {
    if !bytes.len().is_multiple_of(ENTRY_BYTES) {
        return Err(Error::Invalid(format!(
            "schedule file length {} is not a multiple of {ENTRY_BYTES}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(ENTRY_BYTES)
        .enumerate()
        .map(|(i, c)| ScheduleEntry {
            occurrence_index: i as u64,
            segment_id: u64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
            variant_seed: u64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
        })
        .collect())
}

/// Canonical manifest JSON. The schedule is inlined when it has at most
/// [`SCHEDULE_INLINE_LIMIT`] entries and written to [`schedule_path`]
/// otherwise; either way `schedule_len` and `schedule_sha256` (over the
/// binary encoding) are recorded.
pub fn manifest_json(manifest: &CorpusManifest, external: bool) -> Result<(String, Vec<u8>)> {
    let mut value = serde_json::to_value(manifest).map_err(|e| Error::json("manifest", e))?;
    let obj = value.as_object_mut().expect("manifest serializes to an object");
    let binary = encode_schedule(&manifest.schedule);
    obj.insert("schedule_len".into(), Value::from(manifest.schedule.len() as u64));
    obj.insert("schedule_sha256".into(), Value::from(hex::encode(Sha256::digest(&binary))));
    if external {
        obj.insert("schedule_file".into(), Value::from("schedule.bin"));
    } else {
        let entries = serde_json::to_value(&manifest.schedule).map_err(|e| Error::json("schedule", e))?;
        obj.insert("schedule".into(), entries);
    }
    let text = to_canonical_string(&value).map_err(|e| Error::json("manifest", e))?;
    Ok((text, binary))
}

pub fn write_manifest(path: &Path, manifest: &CorpusManifest) -> Result<()> {
    let external = manifest.schedule.len() > SCHEDULE_INLINE_LIMIT;
    let (text, binary) = manifest_json(manifest, external)?;
    let bin_path = schedule_path(path);
    if external {
        atomic_write(&bin_path, |w| w.write_all(&binary).map_err(|e| Error::io(&bin_path, e)))?;
    } else if bin_path.exists() {
        fs::remove_file(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    }
    atomic_write(path, |w| {
        w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    })
}

fn take<T: serde::de::DeserializeOwned>(obj: &mut Map<String, Value>, key: &str, path: &Path) -> Result<Option<T>> {
    obj.remove(key)
        .map(|v| serde_json::from_value(v).map_err(|e| Error::json(format!("{}: {key}", path.display()), e)))
        .transpose()
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Invalid(format!("{}: manifest is not a JSON object", path.display())))?;

    let inline: Option<Vec<ScheduleEntry>> = take(obj, "schedule", path)?;
    let external: Option<String> = take(obj, "schedule_file", path)?;
    let len: Option<u64> = take(obj, "schedule_len", path)?;
    let digest: Option<String> = take(obj, "schedule_sha256", path)?;

    let schedule = match (inline, external) {
        (Some(s), None) => s,
        (None, Some(_)) => {
            let bin = schedule_path(path);
            let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
            if let Some(d) = &digest {
                if hex::encode(Sha256::digest(&bytes)) != *d {
                    return Err(Error::Invalid(format!("{}: schedule digest mismatch", bin.display())));
                }
            }
            decode_schedule(&bytes)?
        }
        _ => {
            return Err(Error::Invalid(format!(
                "{}: manifest needs exactly one of `schedule` or `schedule_file`",
                path.display()
            )))
        }
    };
    if let Some(n) = len {
        if n != schedule.len() as u64 {
            return Err(Error::Invalid(format!(
                "{}: schedule_len {n} but {} entries",
                path.display(),
                schedule.len()
            )));
        }
    }
    if let Some((i, e)) = schedule.iter().enumerate().find(|(i, e)| e.occurrence_index != *i as u64) {
        return Err(Error::Invalid(format!(
            "{}: schedule entry {i} has occurrence_index {}",
            path.display(),
            e.occurrence_index
        )));
    }

    let mut manifest: CorpusManifest =
        serde_json::from_value(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    manifest.schedule = schedule;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::super::{build_dense, build_sparse, BucketDef, Layout, MixSpec};
    use super::*;

    fn layout() -> Layout {
        Layout {
            context_len: 32,
            bod_id: 0,
        }
    }

    #[test]
    fn inline_round_trip() {
        let target: Vec<u64> = (0..8).collect();
        let filler: Vec<u64> = (100..200).collect();
        let spec = MixSpec {
            buckets: vec![BucketDef { frequency: 2, count: 3 }],
            target_fraction: 0.1,
            seed: 3,
            min_spacing: None,
            batch_size_tokens: Some(1 << 20),
        };
        let m = build_sparse(layout(), &spec, &target, &filler).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_manifest(&p, &m).unwrap();
        assert!(!schedule_path(&p).exists());
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"target_fraction\":0.100000"));
        assert_eq!(read_manifest(&p).unwrap(), m);
    }

    #[test]
    fn external_schedule_round_trip_and_digest() {
        let ids: Vec<u64> = (0..3000).collect();
        let m = build_dense(layout(), &ids, 4, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_manifest(&p, &m).unwrap();
        let bin = schedule_path(&p);
        assert_eq!(fs::metadata(&bin).unwrap().len(), 12_000 * 16);
        assert_eq!(read_manifest(&p).unwrap(), m);

        let mut bytes = fs::read(&bin).unwrap();
        bytes[5] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(read_manifest(&p).is_err());
    }

    #[test]
    fn same_inputs_same_bytes() {
        let ids: Vec<u64> = (0..50).collect();
        let a = manifest_json(&build_dense(layout(), &ids, 3, 5).unwrap(), false).unwrap();
        let b = manifest_json(&build_dense(layout(), &ids, 3, 5).unwrap(), false).unwrap();
        assert_eq!(a, b);
    }
}
