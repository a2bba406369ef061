use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::mix64;
use crate::tokendata::{SegmentId, TokenId};

/// Positions excluded from the loss. `mask[i]` is true when token `i` is
/// dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldfishMask {
    pub segment_id: SegmentId,
    pub mask: Vec<bool>,
    pub k: u64,
    pub h: usize,
}

impl GoldfishMask {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.masked_count() as f64 / self.mask.len() as f64
        }
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Keyed 64-bit hash of a token window, built from the SplitMix64 mixer.
pub fn window_hash(window: &[TokenId], key: u64) -> u64 {
    let mut state = mix64(key ^ 0x6a09_e667_f3bc_c909);
    for &t in window {
        state = mix64(state ^ u64::from(t)).wrapping_add(0x9e37_79b9_7f4a_7c15);
    }
    mix64(state ^ window.len() as u64)
}

fn check(k: u64, h: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("goldfish k must be at least 1".into()));
    }
    if h == 0 {
        return Err(Error::Config("goldfish h must be at least 1".into()));
    }
    Ok(())
}

#[inline]
fn decide(tokens: &[TokenId], i: usize, k: u64, h: usize, key: u64) -> bool {
    i >= h && window_hash(&tokens[i - h..i], key).is_multiple_of(k)
}

/// Position `i >= h` is masked iff the hash of `tokens[i-h..i)` is divisible
/// by `k`. Positions below `h` are never masked.
pub fn goldfish_mask(segment_id: SegmentId, tokens: &[TokenId], k: u64, h: usize, key: u64) -> Result<GoldfishMask> {
    check(k, h)?;
    let mask = (0..tokens.len()).map(|i| decide(tokens, i, k, h, key)).collect();
    Ok(GoldfishMask { segment_id, mask, k, h })
}

/// Same result as [`goldfish_mask`] for any thread count.
pub fn goldfish_mask_parallel(
    segment_id: SegmentId,
    tokens: &[TokenId],
    k: u64,
    h: usize,
    key: u64,
) -> Result<GoldfishMask> {
    check(k, h)?;
    let mask = (0..tokens.len())
        .into_par_iter()
        .with_min_len(4096)
        .map(|i| decide(tokens, i, k, h, key))
        .collect();
    Ok(GoldfishMask { segment_id, mask, k, h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn random_tokens(n: usize, seed: u64) -> Vec<TokenId> {
        let mut rng = DetRng::new(seed);
        (0..n).map(|_| rng.below(50_000) as TokenId).collect()
    }

    #[test]
    fn k_one_masks_everything_after_h() {
        let t = random_tokens(100, 1);
        let m = goldfish_mask(0, &t, 1, 10, 7).unwrap();
        assert!(m.mask[..10].iter().all(|&b| !b));
        assert!(m.mask[10..].iter().all(|&b| b));
    }

    #[test]
    fn rejects_zero_parameters() {
        assert!(goldfish_mask(0, &[1, 2], 0, 1, 0).is_err());
        assert!(goldfish_mask(0, &[1, 2], 1, 0, 0).is_err());
    }

    #[test]
    fn decision_depends_on_window_content_only() {
        let window = random_tokens(50, 2);
        let mut a = random_tokens(30, 3);
        a.extend_from_slice(&window);
        a.push(1);
        let mut b = random_tokens(200, 4);
        b.extend_from_slice(&window);
        b.push(2);
        for key in 0..200 {
            let ma = goldfish_mask(0, &a, 3, 50, key).unwrap();
            let mb = goldfish_mask(1, &b, 3, 50, key).unwrap();
            assert_eq!(ma.mask[80], mb.mask[250]);
        }
    }

    #[test]
    fn parallel_matches_serial() {
        let t = random_tokens(20_000, 5);
        assert_eq!(
            goldfish_mask(0, &t, 50, 50, 9).unwrap(),
            goldfish_mask_parallel(0, &t, 50, 50, 9).unwrap()
        );
    }
}
