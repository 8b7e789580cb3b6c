use serde::{Deserialize, Serialize};

/// Matching counts that can be pooled across episodes before scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Steps that are not ground-truth boundaries (for the false-positive rate).
    pub negatives: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
    pub tolerance: usize,
    pub counts: BoundaryCounts,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl BoundaryCounts {
    /// Greedy one-to-one matching: each prediction, earliest first, takes the
    /// earliest unmatched truth within `tol` steps. `len` is the episode
    /// length, used only to count negatives (steps `1..len` that are not
    /// boundaries).
    pub fn matched(predicted: &[usize], truth: &[usize], tol: usize, len: Option<usize>) -> Self {
        let mut pred = predicted.to_vec();
        pred.sort_unstable();
        let mut used = vec![false; truth.len()];
        let mut tp = 0;
        for &p in &pred {
            let hit = truth
                .iter()
                .enumerate()
                .find(|&(j, &t)| !used[j] && p.abs_diff(t) <= tol)
                .map(|(j, _)| j);
            if let Some(j) = hit {
                used[j] = true;
                tp += 1;
            }
        }
        Self {
            true_positives: tp,
            false_positives: pred.len() - tp,
            false_negatives: truth.len() - tp,
            negatives: len.map_or(0, |l| l.saturating_sub(1).saturating_sub(truth.len())),
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
        self.negatives += other.negatives;
    }

    pub fn score(&self, tolerance: usize) -> BoundaryScore {
        let tp = self.true_positives;
        let precision = ratio(tp, tp + self.false_positives);
        let recall = ratio(tp, tp + self.false_negatives);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        BoundaryScore {
            precision,
            recall,
            f1,
            true_positive_rate: recall,
            false_positive_rate: ratio(self.false_positives.min(self.negatives), self.negatives),
            tolerance,
            counts: *self,
        }
    }
}

pub fn boundary_f1(predicted: &[usize], truth: &[usize], tol: usize) -> BoundaryScore {
    BoundaryCounts::matched(predicted, truth, tol, None).score(tol)
}

/// Pools counts over `(predicted, truth, len)` episodes, then scores.
pub fn pooled_f1<'a, I>(episodes: I, tol: usize) -> BoundaryScore
where
    I: IntoIterator<Item = (&'a [usize], &'a [usize], usize)>,
{
    let mut total = BoundaryCounts::default();
    for (p, t, len) in episodes {
        total.merge(&BoundaryCounts::matched(p, t, tol, Some(len)));
    }
    total.score(tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_empty() {
        assert_eq!(boundary_f1(&[10, 20], &[10, 20], 1).f1, 1.0);
        assert_eq!(boundary_f1(&[], &[10, 20], 1).f1, 0.0);
        assert_eq!(boundary_f1(&[], &[], 1).f1, 0.0);
    }

    #[test]
    fn tolerance_controls_matching() {
        assert_eq!(boundary_f1(&[11, 20], &[10, 20], 1).f1, 1.0);
        assert_eq!(boundary_f1(&[11, 20], &[10, 20], 0).f1, 0.5);
    }

    #[test]
    fn matching_is_one_to_one() {
        let s = boundary_f1(&[9, 10, 11], &[10], 1);
        assert_eq!(s.counts.true_positives, 1);
        assert_eq!(s.counts.false_positives, 2);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 1.0);
    }

    #[test]
    fn false_positive_rate_uses_negatives() {
        let c = BoundaryCounts::matched(&[3, 10], &[10], 0, Some(15));
        let s = c.score(0);
        assert_eq!(c.negatives, 13);
        assert!((s.false_positive_rate - 1.0 / 13.0).abs() < 1e-12);
    }

    fn sorted_set() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::btree_set(1usize..60, 0..12).prop_map(|s| s.into_iter().collect())
    }

    proptest! {
        #[test]
        fn symmetric_at_zero_tolerance(a in sorted_set(), b in sorted_set()) {
            let ab = boundary_f1(&a, &b, 0);
            let ba = boundary_f1(&b, &a, 0);
            prop_assert!((ab.f1 - ba.f1).abs() < 1e-12);
            prop_assert!((ab.precision - ba.recall).abs() < 1e-12);
        }

        #[test]
        fn counts_cover_truth(a in sorted_set(), b in sorted_set(), tol in 0usize..3) {
            let s = boundary_f1(&a, &b, tol);
            prop_assert_eq!(s.counts.true_positives + s.counts.false_negatives, b.len());
            prop_assert!((0.0..=1.0).contains(&s.f1));
        }
    }
}
