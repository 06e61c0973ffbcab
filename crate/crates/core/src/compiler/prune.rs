//! Balanced magnitude pruning.
//!
//! Weights are split into fixed-size groups (one register-file window each)
//! and every group keeps the same number of largest-magnitude entries, so
//! every PE stream has the same length and lock-step peers never stall.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PruneMask {
    pub keep: Vec<bool>,
    pub group: usize,
    /// Groups restart at every row boundary (one row per output channel).
    pub row_len: usize,
}

impl PruneMask {
    pub fn dense(len: usize, group: usize) -> Self {
        PruneMask {
            keep: vec![true; len],
            group,
            row_len: len.max(1),
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn density(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.kept() as f64 / self.keep.len() as f64
    }

    /// Groups as `(start, len)` spans in flat index space.
    pub fn groups(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let rows = self.keep.len() / self.row_len.max(1);
        (0..rows).flat_map(move |r| {
            let base = r * self.row_len;
            (0..self.row_len.div_ceil(self.group)).map(move |g| {
                let start = g * self.group;
                (base + start, self.group.min(self.row_len - start))
            })
        })
    }

    /// Kept fraction counting only complete groups.
    pub fn complete_group_density(&self) -> Option<f64> {
        let (mut kept, mut total) = (0usize, 0usize);
        for (start, len) in self.groups() {
            if len == self.group {
                kept += self.keep[start..start + len].iter().filter(|&&k| k).count();
                total += len;
            }
        }
        (total > 0).then(|| kept as f64 / total as f64)
    }
}

/// Number of entries a group of `len` keeps at `sparsity`.
pub fn keep_count(len: usize, sparsity: f64) -> usize {
    // tolerate representation error in e.g. 16 * (1 - 0.5)
    let k = (len as f64 * (1.0 - sparsity) - 1e-9).ceil();
    (k.max(0.0) as usize).min(len)
}

/// Balanced pruning over consecutive groups of a flat weight array.
pub fn prune_balanced(weights: &[f64], sparsity: f64, group: usize) -> Result<PruneMask> {
    prune_rows(weights, weights.len().max(1), sparsity, group)
}

/// Balanced pruning where groups are aligned to rows of `row_len`.
pub fn prune_rows(weights: &[f64], row_len: usize, sparsity: f64, group: usize) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Calib(format!("sparsity {sparsity} outside [0, 1)")));
    }
    if group == 0 || row_len == 0 {
        return Err(Error::shape("group size and row length must be positive"));
    }
    if !weights.len().is_multiple_of(row_len) {
        return Err(Error::shape(format!(
            "{} weights do not split into rows of {row_len}",
            weights.len()
        )));
    }
    let mut mask = PruneMask {
        keep: vec![false; weights.len()],
        group,
        row_len,
    };
    let spans: Vec<_> = mask.groups().collect();
    let mut order = Vec::with_capacity(group);
    for (start, len) in spans {
        order.clear();
        order.extend(start..start + len);
        // descending magnitude, lower index first on ties
        order.sort_by(|&a, &b| weights[b].abs().total_cmp(&weights[a].abs()).then(a.cmp(&b)));
        for &i in &order[..keep_count(len, sparsity)] {
            mask.keep[i] = true;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_are_pruned_first() {
        let w: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 0.0 } else { i as f64 }).collect();
        let m = prune_balanced(&w, 0.5, 16).unwrap();
        for i in 0..16 {
            assert_eq!(m.keep[i], i % 2 == 1);
        }
    }

    #[test]
    fn alternating_signs_descending_magnitude() {
        // [16, -15, 14, -13, ...]
        let w: Vec<f64> = (0..16)
            .map(|i| {
                let mag = 16.0 - i as f64;
                if i % 2 == 0 { mag } else { -mag }
            })
            .collect();
        let m = prune_balanced(&w, 0.5, 16).unwrap();
        // brute force: rank by |w| via pairwise comparison
        let expected: Vec<bool> = (0..16)
            .map(|i| {
                let larger = (0..16)
                    .filter(|&j| w[j].abs() > w[i].abs() || (w[j].abs() == w[i].abs() && j < i))
                    .count();
                larger < 8
            })
            .collect();
        assert_eq!(m.keep, expected);
        assert_eq!(&m.keep[..8], &[true; 8]);
    }

    #[test]
    fn equal_magnitudes_keep_lowest_indices() {
        let w = vec![0.5; 16];
        let m = prune_balanced(&w, 0.5, 16).unwrap();
        assert_eq!(&m.keep[..8], &[true; 8]);
        assert_eq!(&m.keep[8..], &[false; 8]);
    }

    #[test]
    fn partial_group_keep_count() {
        assert_eq!(keep_count(16, 0.5), 8);
        assert_eq!(keep_count(5, 0.5), 3);
        assert_eq!(keep_count(16, 0.0), 16);
        assert_eq!(keep_count(16, 0.75), 4);
        assert_eq!(keep_count(3, 0.9), 1);
        let w: Vec<f64> = (0..21).map(|i| i as f64).collect();
        let m = prune_balanced(&w, 0.5, 16).unwrap();
        assert_eq!(m.kept(), 8 + 3);
        assert_eq!(m.complete_group_density(), Some(0.5));
    }

    #[test]
    fn rows_restart_groups() {
        // two rows of 20: groups (16, 4) per row
        let w: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let m = prune_rows(&w, 20, 0.5, 16).unwrap();
        let spans: Vec<_> = m.groups().collect();
        assert_eq!(spans, vec![(0, 16), (16, 4), (20, 16), (36, 4)]);
        assert_eq!(m.kept(), 2 * (8 + 2));
    }

    #[test]
    fn bad_arguments() {
        assert!(prune_balanced(&[1.0], 1.0, 16).is_err());
        assert!(prune_balanced(&[1.0], -0.1, 16).is_err());
        assert!(prune_balanced(&[1.0], 0.5, 0).is_err());
        assert!(prune_rows(&[1.0; 5], 2, 0.5, 16).is_err());
    }

    proptest! {
        #[test]
        fn every_group_balanced(w in proptest::collection::vec(-1.0f64..1.0, 1..200), s in 0usize..4) {
            let sparsity = [0.0, 0.25, 0.5, 0.75][s];
            let m = prune_balanced(&w, sparsity, 16).unwrap();
            for (start, len) in m.groups() {
                let kept = m.keep[start..start + len].iter().filter(|&&k| k).count();
                prop_assert_eq!(kept, keep_count(len, sparsity));
                // every kept magnitude dominates every pruned one
                let min_kept = (start..start + len).filter(|&i| m.keep[i]).map(|i| w[i].abs()).fold(f64::INFINITY, f64::min);
                let max_pruned = (start..start + len).filter(|&i| !m.keep[i]).map(|i| w[i].abs()).fold(0.0, f64::max);
                prop_assert!(min_kept >= max_pruned);
            }
        }

        #[test]
        fn half_density_on_complete_groups(w in proptest::collection::vec(-1.0f64..1.0, 1..8usize).prop_flat_map(|v| {
            let n = v.len() * 16;
            proptest::collection::vec(-1.0f64..1.0, n)
        })) {
            let m = prune_balanced(&w, 0.5, 16).unwrap();
            prop_assert_eq!(m.kept() * 2, w.len());
        }
    }
}
