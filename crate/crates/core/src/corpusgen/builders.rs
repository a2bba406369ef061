use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{BucketDef, BucketSpec, CorpusManifest, Layout, Scenario, ScheduleEntry, TokenTotals};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, mix64, DetRng};
use crate::tokendata::SegmentId;

// Independent random streams derived from the manifest seed.
const STREAM_DENSE: u64 = 1;
const STREAM_BUCKETS: u64 = 2;
const STREAM_FILLER: u64 = 3;
const STREAM_SCHEDULE: u64 = 4;
const STREAM_VARIANT: u64 = 5;
pub(super) const STREAM_DONOR: u64 = 6;

/// Fractions are compared as integers at this scale.
const FRACTION_SCALE: u128 = 1_000_000_000;

/// Parameters shared by the sparse and swapped builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub buckets: Vec<BucketDef>,
    pub target_fraction: f64,
    pub seed: u64,
    /// Minimum distance between two occurrences of the same segment.
    /// `None` keeps the plain uniform shuffle.
    #[serde(default)]
    pub min_spacing: Option<u64>,
    #[serde(default)]
    pub batch_size_tokens: Option<u64>,
}

pub fn build_dense(layout: Layout, segment_ids: &[SegmentId], epochs: u32, seed: u64) -> Result<CorpusManifest> {
    if epochs < 1 {
        return Err(Error::Config("dense scenario needs at least one epoch".into()));
    }
    if segment_ids.is_empty() {
        return Err(Error::InsufficientPool("dense scenario needs at least one segment".into()));
    }
    check_distinct(segment_ids)?;

    let mut schedule = Vec::with_capacity(segment_ids.len() * epochs as usize);
    for epoch in 0..epochs {
        let mut perm = segment_ids.to_vec();
        DetRng::derived(seed, &[STREAM_DENSE, u64::from(epoch)]).shuffle(&mut perm);
        for segment_id in perm {
            schedule.push(ScheduleEntry {
                occurrence_index: schedule.len() as u64,
                segment_id,
                variant_seed: 0,
            });
        }
    }

    let mut checkpoints: Vec<u32> = std::iter::successors(Some(1u32), |e| e.checked_mul(2))
        .take_while(|&e| e <= epochs)
        .collect();
    if checkpoints.last() != Some(&epochs) {
        checkpoints.push(epochs);
    }

    Ok(CorpusManifest {
        scenario: Scenario::Dense,
        seed,
        context_len: layout.context_len,
        bod_id: layout.bod_id,
        buckets: vec![BucketSpec {
            label: "dense".into(),
            frequency: epochs,
            segment_ids: segment_ids.to_vec(),
        }],
        filler_segment_ids: Vec::new(),
        donor_segment_ids: Vec::new(),
        swap_len: None,
        retained_len: None,
        epochs: Some(epochs),
        checkpoint_epochs: checkpoints,
        target_fraction: None,
        min_spacing: None,
        token_totals: TokenTotals::from_counts(schedule.len() as u64, 0, layout.context_len),
        batch_size_tokens: None,
        schedule,
    })
}

pub fn build_sparse(
    layout: Layout,
    spec: &MixSpec,
    target_pool: &[SegmentId],
    filler_pool: &[SegmentId],
) -> Result<CorpusManifest> {
    let mix = build_mix(spec, target_pool, filler_pool)?;
    Ok(mix.into_manifest(Scenario::Sparse, layout, spec, None))
}

/// Like [`build_sparse`], but every bucket occurrence gets a fresh donor
/// prefix of `swap_len` tokens when materialized.
pub fn build_swapped(
    layout: Layout,
    spec: &MixSpec,
    target_pool: &[SegmentId],
    donor_pool: &[SegmentId],
    filler_pool: &[SegmentId],
    swap_len: usize,
) -> Result<CorpusManifest> {
    if swap_len == 0 || swap_len + 1 >= layout.context_len {
        return Err(Error::Config(format!(
            "swapped scenario needs 0 < swap_len and swap_len + 1 < context_len (swap_len {swap_len}, context_len {})",
            layout.context_len
        )));
    }
    check_distinct(donor_pool)?;
    let mut mix = build_mix(spec, target_pool, filler_pool)?;
    for b in mix.buckets.iter().filter(|b| b.frequency > 0) {
        for &s in &b.segment_ids {
            if !donor_pool.iter().any(|&d| d != s) {
                return Err(Error::InsufficientPool(format!("donor pool has no segment other than {s}")));
            }
        }
    }

    let variant_key = derive_seed(spec.seed, &[STREAM_VARIANT]);
    let bucketed: HashSet<SegmentId> = mix.buckets.iter().flat_map(|b| b.segment_ids.iter().copied()).collect();
    for e in mix.schedule.iter_mut() {
        if bucketed.contains(&e.segment_id) {
            e.variant_seed = mix64(variant_key.wrapping_add(e.occurrence_index));
        }
    }
    let mut donors = donor_pool.to_vec();
    donors.sort_unstable();
    mix.donors = donors;
    Ok(mix.into_manifest(Scenario::Swapped, layout, spec, Some(swap_len)))
}

struct Mix {
    buckets: Vec<BucketSpec>,
    filler: Vec<SegmentId>,
    donors: Vec<SegmentId>,
    schedule: Vec<ScheduleEntry>,
    target_occurrences: u64,
}

impl Mix {
    fn into_manifest(self, scenario: Scenario, layout: Layout, spec: &MixSpec, swap_len: Option<usize>) -> CorpusManifest {
        CorpusManifest {
            scenario,
            seed: spec.seed,
            context_len: layout.context_len,
            bod_id: layout.bod_id,
            buckets: self.buckets,
            token_totals: TokenTotals::from_counts(
                self.target_occurrences,
                self.filler.len() as u64,
                layout.context_len,
            ),
            filler_segment_ids: self.filler,
            donor_segment_ids: self.donors,
            swap_len,
            retained_len: swap_len.map(|s| layout.context_len - 1 - s),
            epochs: None,
            checkpoint_epochs: Vec::new(),
            target_fraction: Some(spec.target_fraction),
            min_spacing: spec.min_spacing,
            batch_size_tokens: spec.batch_size_tokens,
            schedule: self.schedule,
        }
    }
}

fn check_distinct(ids: &[SegmentId]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for &id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateSegment(id));
        }
    }
    Ok(())
}

/// Smallest filler count `n` with `target / (target + n) <= fraction`.
pub(crate) fn filler_needed(target_occurrences: u64, target_fraction: f64) -> Result<u64> {
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "target fraction must be in (0, 1], got {target_fraction}"
        )));
    }
    let p = (target_fraction * FRACTION_SCALE as f64).round() as u128;
    if p == 0 {
        return Err(Error::Config(format!("target fraction {target_fraction} is too small")));
    }
    let t = u128::from(target_occurrences);
    let n = (t * (FRACTION_SCALE - p)).div_ceil(p);
    u64::try_from(n).map_err(|_| Error::Config("filler requirement overflows".into()))
}

fn build_mix(spec: &MixSpec, target_pool: &[SegmentId], filler_pool: &[SegmentId]) -> Result<Mix> {
    check_distinct(target_pool)?;
    check_distinct(filler_pool)?;
    let target_set: HashSet<SegmentId> = target_pool.iter().copied().collect();
    if let Some(&dup) = filler_pool.iter().find(|s| target_set.contains(s)) {
        return Err(Error::DuplicateSegment(dup));
    }

    let wanted: usize = spec.buckets.iter().map(|b| b.count).sum();
    if wanted > target_pool.len() {
        return Err(Error::InsufficientPool(format!(
            "buckets need {wanted} target segments, pool has {}",
            target_pool.len()
        )));
    }

    let chosen = DetRng::derived(spec.seed, &[STREAM_BUCKETS]).sample(target_pool, wanted);
    let mut buckets = Vec::with_capacity(spec.buckets.len());
    let mut offset = 0;
    let mut target_occurrences = 0u64;
    for def in &spec.buckets {
        let mut ids = chosen[offset..offset + def.count].to_vec();
        ids.sort_unstable();
        offset += def.count;
        target_occurrences += u64::from(def.frequency) * def.count as u64;
        buckets.push(BucketSpec {
            label: format!("freq-{}", def.frequency),
            frequency: def.frequency,
            segment_ids: ids,
        });
    }

    let n_filler = filler_needed(target_occurrences, spec.target_fraction)?;
    if n_filler as usize > filler_pool.len() {
        return Err(Error::InsufficientPool(format!(
            "target fraction {} needs {n_filler} filler segments, pool has {}",
            spec.target_fraction,
            filler_pool.len()
        )));
    }
    let mut filler = DetRng::derived(spec.seed, &[STREAM_FILLER]).sample(filler_pool, n_filler as usize);
    filler.sort_unstable();

    let mut occurrences: Vec<SegmentId> = Vec::with_capacity((target_occurrences + n_filler) as usize);
    for b in &buckets {
        for &s in &b.segment_ids {
            occurrences.extend(std::iter::repeat_n(s, b.frequency as usize));
        }
    }
    occurrences.extend_from_slice(&filler);

    let mut rng = DetRng::derived(spec.seed, &[STREAM_SCHEDULE]);
    rng.shuffle(&mut occurrences);
    let order = match spec.min_spacing {
        Some(gap) if gap > 1 => enforce_spacing(occurrences, gap)?,
        _ => occurrences,
    };

    let schedule = order
        .into_iter()
        .enumerate()
        .map(|(i, segment_id)| ScheduleEntry {
            occurrence_index: i as u64,
            segment_id,
            variant_seed: 0,
        })
        .collect();

    Ok(Mix {
        buckets,
        filler,
        donors: Vec::new(),
        schedule,
        target_occurrences,
    })
}

/// Reorder a shuffled occurrence list so repeated segments are at least
/// `gap` positions apart. Greedy and deterministic: items that would land
/// too close are deferred and retried first at every later position.
fn enforce_spacing(shuffled: Vec<SegmentId>, gap: u64) -> Result<Vec<SegmentId>> {
    let n = shuffled.len();
    let mut out = Vec::with_capacity(n);
    let mut last: HashMap<SegmentId, usize> = HashMap::new();
    let mut deferred: VecDeque<SegmentId> = VecDeque::new();
    let mut stream = shuffled.into_iter();
    let fits = |last: &HashMap<SegmentId, usize>, s: SegmentId, pos: usize| {
        last.get(&s).is_none_or(|&p| (pos - p) as u64 >= gap)
    };

    while out.len() < n {
        let pos = out.len();
        let mut placed = None;
        if let Some(i) = deferred.iter().position(|&s| fits(&last, s, pos)) {
            placed = deferred.remove(i);
        } else {
            for s in stream.by_ref() {
                if fits(&last, s, pos) {
                    placed = Some(s);
                    break;
                }
                deferred.push_back(s);
            }
        }
        match placed {
            Some(s) => {
                last.insert(s, pos);
                out.push(s);
            }
            None => {
                return Err(Error::Config(format!(
                    "cannot keep repeated segments {gap} apart: stuck at position {pos} of {n}"
                )))
            }
        }
    }
    Ok(out)
}
