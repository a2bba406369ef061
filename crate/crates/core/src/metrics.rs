//! Verbatim-recall and degeneration metrics over token ids.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::probekit::ProbeRecord;
use crate::rng::DetRng;
use crate::tokendata::{Segment, TokenId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("sequence is empty")]
    EmptyInput,
    #[error("length mismatch: generated {generated}, reference {reference}")]
    LengthMismatch { generated: usize, reference: usize },
    #[error("log-probability at position {position} is {value}, expected a finite value <= 0")]
    BadLogprob { position: usize, value: f64 },
}

/// Longest common subsequence length, `O(|y|·|s|)` time and
/// `O(min(|y|,|s|))` memory.
pub fn lcs_len(y: &[TokenId], s: &[TokenId]) -> usize {
    let (long, short) = if y.len() >= s.len() { (y, s) } else { (s, y) };
    if short.is_empty() {
        return 0;
    }
    let mut row = vec![0u32; short.len() + 1];
    for &a in long {
        let mut diag = 0u32;
        for (j, &b) in short.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if a == b { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[short.len()] as usize
}

/// Longest common contiguous run length.
pub fn lccs_len(y: &[TokenId], s: &[TokenId]) -> usize {
    if y.is_empty() || s.is_empty() {
        return 0;
    }
    let mut row = vec![0u32; s.len() + 1];
    let mut best = 0u32;
    for &a in y {
        for j in (0..s.len()).rev() {
            row[j + 1] = if a == s[j] { row[j] + 1 } else { 0 };
            best = best.max(row[j + 1]);
        }
    }
    best as usize
}

/// LCS length over reference length.
pub fn rouge_l(y: &[TokenId], s: &[TokenId]) -> Result<f64, MetricError> {
    if s.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(lcs_len(y, s) as f64 / s.len() as f64)
}

/// Longest common contiguous run over reference length.
pub fn lccs(y: &[TokenId], s: &[TokenId]) -> Result<f64, MetricError> {
    if s.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(lccs_len(y, s) as f64 / s.len() as f64)
}

pub fn exact_match(y: &[TokenId], s: &[TokenId]) -> Result<bool, MetricError> {
    if y.len() != s.len() {
        return Err(MetricError::LengthMismatch {
            generated: y.len(),
            reference: s.len(),
        });
    }
    Ok(y == s)
}

/// Unique tokens over total tokens.
pub fn ttr(y: &[TokenId]) -> Result<f64, MetricError> {
    if y.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let unique: HashSet<TokenId> = y.iter().copied().collect();
    Ok(unique.len() as f64 / y.len() as f64)
}

/// `exp(-mean(logprobs))` with natural-log inputs.
pub fn perplexity(logprobs: &[f64]) -> Result<f64, MetricError> {
    if logprobs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    // Mean shifted by the first value: exact for constant input.
    let first = logprobs[0];
    let mut delta = 0.0;
    for (position, &value) in logprobs.iter().enumerate() {
        if !value.is_finite() || value > 0.0 {
            return Err(MetricError::BadLogprob { position, value });
        }
        delta += value - first;
    }
    Ok((-(first + delta / logprobs.len() as f64)).exp())
}

/// One model continuation for one probe, as produced by a model runner or
/// an oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub probe_id: String,
    pub model_tag: String,
    pub generated_suffix: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mauve: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub probe_id: String,
    pub model_tag: String,
    pub rouge_l: f64,
    pub lccs: f64,
    pub em: bool,
    pub ttr: f64,
    pub ppl: Option<f64>,
    pub mauve: Option<f64>,
}

pub fn score_one(probe: &ProbeRecord, generation: &GenerationRecord) -> Result<ScoreRecord> {
    let s = &probe.true_suffix;
    let y = &generation.generated_suffix;
    let em = exact_match(y, s)?;
    let ppl = match &generation.ref_logprobs {
        Some(lp) if lp.len() != s.len() => {
            return Err(MetricError::LengthMismatch {
                generated: lp.len(),
                reference: s.len(),
            }
            .into())
        }
        Some(lp) => Some(perplexity(lp)?),
        None => None,
    };
    if let Some(m) = generation.mauve {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Invalid(format!(
                "probe {}: mauve {m} outside [0, 1]",
                generation.probe_id
            )));
        }
    }
    let rec = ScoreRecord {
        probe_id: generation.probe_id.clone(),
        model_tag: generation.model_tag.clone(),
        rouge_l: rouge_l(y, s)?,
        lccs: lccs(y, s)?,
        em,
        ttr: ttr(y)?,
        ppl,
        mauve: generation.mauve,
    };
    debug_assert!(!rec.em || (rec.rouge_l == 1.0 && rec.lccs == 1.0));
    Ok(rec)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreOutcome {
    pub scores: Vec<ScoreRecord>,
    /// Generations whose probe id is not in the probe set (lenient mode).
    pub unmatched: Vec<String>,
}

/// Join generations to probes and score each pair. Output is sorted by
/// `(probe_id, model_tag)`. In strict mode a dangling probe id is an error;
/// otherwise it is reported in [`ScoreOutcome::unmatched`].
pub fn score_all(probes: &[ProbeRecord], generations: &[GenerationRecord], strict: bool) -> Result<ScoreOutcome> {
    let by_id: HashMap<&str, &ProbeRecord> = probes.iter().map(|p| (p.probe_id.as_str(), p)).collect();

    let mut seen = HashSet::with_capacity(generations.len());
    let mut joined = Vec::with_capacity(generations.len());
    let mut unmatched = Vec::new();
    for g in generations {
        if !seen.insert((g.probe_id.as_str(), g.model_tag.as_str())) {
            return Err(Error::DuplicateProbe {
                probe_id: g.probe_id.clone(),
                model_tag: g.model_tag.clone(),
            });
        }
        match by_id.get(g.probe_id.as_str()) {
            Some(p) => joined.push((*p, g)),
            None if strict => return Err(Error::DanglingProbe(g.probe_id.clone())),
            None => unmatched.push(g.probe_id.clone()),
        }
    }
    unmatched.sort();

    let mut scores = joined
        .par_iter()
        .map(|(p, g)| score_one(p, g))
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| (&a.probe_id, &a.model_tag).cmp(&(&b.probe_id, &b.model_tag)));
    Ok(ScoreOutcome { scores, unmatched })
}

/// Mean ROUGE-L over `pairs` seeded pairs of `suffix_len`-token slices taken
/// from two different segments, each slice at a uniform position within the
/// segment payload.
pub fn unrelated_baseline(segments: &[Segment], pairs: usize, suffix_len: usize, seed: u64) -> Result<f64> {
    let usable: Vec<&[TokenId]> = segments
        .iter()
        .map(|s| s.payload())
        .filter(|p| p.len() >= suffix_len)
        .collect();
    unrelated_baseline_slices(&usable, pairs, suffix_len, seed)
}

/// [`unrelated_baseline`] over raw token sequences.
pub fn unrelated_baseline_slices(sequences: &[&[TokenId]], pairs: usize, suffix_len: usize, seed: u64) -> Result<f64> {
    if suffix_len == 0 {
        return Err(MetricError::EmptyReference.into());
    }
    let usable: Vec<&[TokenId]> = sequences.iter().copied().filter(|p| p.len() >= suffix_len).collect();
    if usable.len() < 2 {
        return Err(Error::InsufficientPool(format!(
            "unrelated baseline needs two sequences of at least {suffix_len} tokens, have {}",
            usable.len()
        )));
    }
    if pairs == 0 {
        return Err(Error::Invalid("unrelated baseline needs at least one pair".into()));
    }
    let mut rng = DetRng::new(seed);
    let slice = |i: usize, rng: &mut DetRng| {
        let seq = usable[i];
        let start = rng.index(seq.len() - suffix_len + 1);
        &seq[start..start + suffix_len]
    };
    let drawn: Vec<(&[TokenId], &[TokenId])> = (0..pairs)
        .map(|_| {
            let a = rng.index(usable.len());
            let b = (a + 1 + rng.index(usable.len() - 1)) % usable.len();
            (slice(a, &mut rng), slice(b, &mut rng))
        })
        .collect();
    let mut values: Vec<f64> = drawn
        .par_iter()
        .map(|(y, s)| lcs_len(y, s) as f64 / s.len() as f64)
        .collect();
    values.sort_by(f64::total_cmp);
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: u32 = 1;
    const B: u32 = 2;
    const C: u32 = 3;
    const D: u32 = 4;
    const E: u32 = 5;

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&[A, B, C, D], &[A, C, D, E]).unwrap(), 0.75);
        assert_eq!(rouge_l(&[A, B], &[A, B]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[A, B], &[C, D]).unwrap(), 0.0);
        assert_eq!(rouge_l(&[A], &[]), Err(MetricError::EmptyReference));
        assert_eq!(rouge_l(&[], &[A, B]).unwrap(), 0.0);
    }

    #[test]
    fn lccs_examples() {
        let (x, y, z, w, q) = (10, 11, 12, 13, 14);
        assert_eq!(lccs(&[A, B, C, x, y], &[z, B, C, w, q]).unwrap(), 0.4);
        assert_eq!(lccs(&[A, B, C], &[A, B, C]).unwrap(), 1.0);
        assert_eq!(lccs(&[A, B], &[C, D]).unwrap(), 0.0);
        assert!(lccs(&[A], &[]).is_err());
    }

    #[test]
    fn exact_match_contract() {
        assert!(exact_match(&[A, B], &[A, B]).unwrap());
        assert!(!exact_match(&[A, B], &[A, C]).unwrap());
        assert!(matches!(
            exact_match(&[A], &[A, B]),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ttr_examples() {
        let distinct: Vec<u32> = (0..500).collect();
        assert_eq!(ttr(&distinct).unwrap(), 1.0);
        assert_eq!(ttr(&[7; 500]).unwrap(), 0.002);
        assert_eq!(ttr(&[A, B, A, C]).unwrap(), 0.75);
        assert!(ttr(&[]).is_err());
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(&[0.0; 5]).unwrap(), 1.0);
        let v = 32_000f64;
        assert!((perplexity(&[(1.0 / v).ln(); 7]).unwrap() - v).abs() < 1e-6);
        assert!((perplexity(&[0.5f64.ln(), 0.125f64.ln()]).unwrap() - 4.0).abs() < 1e-12);
        assert!(perplexity(&[0.1]).is_err());
        assert!(perplexity(&[f64::NAN]).is_err());
        assert!(perplexity(&[]).is_err());
        for c in [-0.0, -0.5, -3.25] {
            assert_eq!(perplexity(&[c; 9]).unwrap(), (-c).exp());
        }
    }

    #[test]
    fn baseline_degenerate_and_random() {
        let seq: Vec<u32> = (0..1000).map(|i| i % 97).collect();
        let same = [seq.as_slice(), seq.as_slice()];
        // with identical sequences and a full-length slice, every pair is identical
        assert_eq!(unrelated_baseline_slices(&same, 50, 1000, 1).unwrap(), 1.0);

        let mut rng = DetRng::new(3);
        let seqs: Vec<Vec<u32>> = (0..20)
            .map(|_| (0..600).map(|_| rng.below(100_000) as u32).collect())
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        assert!(unrelated_baseline_slices(&refs, 200, 500, 4).unwrap() < 0.05);
        assert!(unrelated_baseline_slices(&refs[..1], 10, 500, 4).is_err());
    }
}
