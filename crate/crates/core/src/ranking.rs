//! Fractional (tie-averaged) ranking shared by every rank-producing stage.

use std::cmp::Ordering;

/// Which end of the value range receives rank 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankOrder {
    /// Rank 1 = largest value.
    Descending,
    /// Rank 1 = smallest value.
    Ascending,
}

/// Ranks `values` starting at 1. Tied values share the mean of the positions
/// they span, so the ranks always sum to n(n+1)/2.
///
/// Values are compared with `f64::total_cmp`; callers reject non-finite input.
pub fn fractional_ranks(values: &[f64], order: RankOrder) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        let o = values[*a].total_cmp(&values[*b]);
        match order {
            RankOrder::Ascending => o,
            RankOrder::Descending => o.reverse(),
        }
    };
    idx.sort_by(cmp);

    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let shared = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = shared;
        }
        start = end;
    }
    ranks
}

/// Index of the largest value; the first index wins ties.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn descending_with_ties() {
        assert_eq!(
            fractional_ranks(&[0.1, 0.1, 0.2, 0.05], RankOrder::Descending),
            vec![2.5, 2.5, 1.0, 4.0]
        );
    }

    #[test]
    fn ascending_basic() {
        assert_eq!(fractional_ranks(&[3.0, 1.0, 2.0], RankOrder::Ascending), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax_first(&[]), None);
    }

    proptest! {
        #[test]
        fn rank_sum_is_triangular(v in prop::collection::vec(-5i32..5, 1..40)) {
            let vals: Vec<f64> = v.iter().map(|x| *x as f64).collect();
            let n = vals.len() as f64;
            let s: f64 = fractional_ranks(&vals, RankOrder::Descending).iter().sum();
            prop_assert!((s - n * (n + 1.0) / 2.0).abs() < 1e-9);
        }

        #[test]
        fn ascending_mirrors_descending(v in prop::collection::vec(-1e3f64..1e3, 1..30)) {
            let n = v.len() as f64;
            let a = fractional_ranks(&v, RankOrder::Ascending);
            let d = fractional_ranks(&v, RankOrder::Descending);
            for (x, y) in a.iter().zip(&d) {
                prop_assert!((x + y - (n + 1.0)).abs() < 1e-12);
            }
        }
    }
}
