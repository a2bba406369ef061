use std::cmp::Ordering;
use std::ops::Range;

use rayon::prelude::*;

/// Suffix array over a `u32` text by prefix doubling. Stops as soon as all
/// ranks are distinct, so texts without long repeats finish in a few rounds.
pub fn build(text: &[u32]) -> Vec<u32> {
    let n = text.len();
    assert!(n < u32::MAX as usize, "text too long for u32 suffix array");
    if n == 0 {
        return Vec::new();
    }
    let mut sa: Vec<u32> = (0..n as u32).collect();
    // Dense initial ranks keep the pair keys within u64.
    sa.par_sort_unstable_by_key(|&i| text[i as usize]);
    let mut rank = vec![0u32; n];
    for w in 1..n {
        let (a, b) = (sa[w - 1] as usize, sa[w] as usize);
        rank[b] = rank[a] + u32::from(text[a] != text[b]);
    }

    let mut k = 1usize;
    let mut next = vec![0u32; n];
    while (rank[sa[n - 1] as usize] as usize) < n - 1 {
        let key = |i: u32| {
            let i = i as usize;
            let second = if i + k < n { u64::from(rank[i + k]) + 1 } else { 0 };
            (u64::from(rank[i]) << 32) | second
        };
        sa.par_sort_unstable_by_key(|&i| key(i));
        next[sa[0] as usize] = 0;
        for w in 1..n {
            next[sa[w] as usize] = next[sa[w - 1] as usize] + u32::from(key(sa[w - 1]) != key(sa[w]));
        }
        std::mem::swap(&mut rank, &mut next);
        k *= 2;
    }
    sa
}

fn cmp_prefix(text: &[u32], start: usize, pattern: &[u32]) -> Ordering {
    let end = (start + pattern.len()).min(text.len());
    let got = &text[start..end];
    match got.cmp(&pattern[..got.len()]) {
        Ordering::Equal if got.len() < pattern.len() => Ordering::Less,
        other => other,
    }
}

/// Range of `sa` whose suffixes start with `pattern`.
pub fn find_range(text: &[u32], sa: &[u32], pattern: &[u32]) -> Range<usize> {
    let lo = sa.partition_point(|&i| cmp_prefix(text, i as usize, pattern) == Ordering::Less);
    let hi = lo + sa[lo..].partition_point(|&i| cmp_prefix(text, i as usize, pattern) == Ordering::Equal);
    lo..hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn naive(text: &[u32]) -> Vec<u32> {
        let mut sa: Vec<u32> = (0..text.len() as u32).collect();
        sa.sort_by(|&a, &b| text[a as usize..].cmp(&text[b as usize..]));
        sa
    }

    #[test]
    fn matches_naive_sort() {
        let mut rng = DetRng::new(1);
        for len in [0, 1, 2, 7, 64, 300] {
            for alphabet in [1, 2, 5, 1000] {
                let text: Vec<u32> = (0..len).map(|_| rng.below(alphabet) as u32).collect();
                assert_eq!(build(&text), naive(&text), "len {len} alphabet {alphabet}");
            }
        }
        let text = vec![3, 1, 4, 1, 5, u32::MAX, 3, 1, 4, 1, 5, u32::MAX];
        assert_eq!(build(&text), naive(&text));
    }

    #[test]
    fn range_search() {
        let text = [1, 2, 1, 2, 3, 1, 2];
        let sa = build(&text);
        let r = find_range(&text, &sa, &[1, 2]);
        let mut hits: Vec<u32> = sa[r].to_vec();
        hits.sort_unstable();
        assert_eq!(hits, vec![0, 2, 5]);
        assert!(find_range(&text, &sa, &[4]).is_empty());
        assert!(find_range(&text, &sa, &[1, 2, 3, 1, 2, 9]).is_empty());
        assert_eq!(find_range(&text, &sa, &[2, 3, 1, 2]).len(), 1);
    }
}
