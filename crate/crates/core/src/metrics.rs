//! Ranking metrics over per-class probability scores.

use crate::error::{Error, Result};

/// AP of one class: samples ranked by score descending (ties by index),
/// mean of precision@k over the ranks of the positives. `None` without positives.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), relevant.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    /// Per class; `None` for classes with no positives.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// `probs[i]` is sample `i`'s probability row, `labels[i]` its class.
pub fn mean_average_precision(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<MapReport> {
    if probs.len() != labels.len() {
        return Err(Error::Usage(format!("{} score rows for {} labels", probs.len(), labels.len())));
    }
    if let Some((i, _)) = probs.iter().enumerate().find(|(_, p)| p.len() != num_classes) {
        return Err(Error::Sample { index: i, msg: format!("score row does not have {num_classes} classes") });
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|m| {
            let scores: Vec<f64> = probs.iter().map(|p| p[m]).collect();
            let relevant: Vec<bool> = labels.iter().map(|&y| y == m).collect();
            let ap = average_precision(&scores, &relevant);
            if ap.is_none() {
                log::warn!("class {m} has no positives; excluded from mAP");
            }
            ap
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Usage("no class has a positive sample".into()));
    }
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MapReport { per_class, map })
}

/// Fraction of rows whose argmax (first on ties) equals the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    correct as f64 / labels.len() as f64
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > xs[best] { i } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_example() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]), Some(1.0));
    }

    #[test]
    fn perfect_classifier() {
        let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]];
        let r = mean_average_precision(&probs, &[0, 1, 0], 2).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(accuracy(&probs, &[0, 1, 0]), 1.0);
    }

    #[test]
    fn empty_class_is_excluded() {
        let probs = vec![vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.0]];
        let r = mean_average_precision(&probs, &[0, 1], 3).unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn map_matches_brute_force() {
        use rand::Rng as _;
        for case in 0..150u64 {
            let mut r = crate::rng::derive(41, &[case]);
            let (n, m) = (r.random_range(1..30), r.random_range(2..5));
            // coarse scores so that ties are common
            let probs: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| r.random_range(0..5) as f64 / 4.0).collect()).collect();
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
            let report = match mean_average_precision(&probs, &labels, m) {
                Ok(rep) => rep,
                Err(_) => continue,
            };
            let mut present = Vec::new();
            for c in 0..m {
                let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
                let rel: Vec<bool> = labels.iter().map(|&y| y == c).collect();
                let want = crate::reference::average_precision(&scores, &rel);
                match (report.per_class[c], want) {
                    (Some(a), Some(b)) => {
                        assert!((a - b).abs() < 1e-12, "case {case} class {c}: {a} vs {b}");
                        present.push(b);
                    }
                    (None, None) => {}
                    other => panic!("case {case} class {c}: {other:?}"),
                }
            }
            let want = present.iter().sum::<f64>() / present.len() as f64;
            assert!((report.map - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn in_unit_interval(scores in prop::collection::vec(0.0f64..1.0, 1..40), seed in any::<u64>()) {
            let relevant: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            if let Some(ap) = average_precision(&scores, &relevant) {
                prop_assert!((0.0..=1.0).contains(&ap));
            }
        }

        #[test]
        fn inverting_top_ranked_positives_cannot_help(n_pos in 1usize..10, n_neg in 1usize..10) {
            let n = n_pos + n_neg;
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let relevant: Vec<bool> = (0..n).map(|i| i < n_pos).collect();
            let inverted: Vec<f64> = scores.iter().map(|s| -s).collect();
            let before = average_precision(&scores, &relevant).unwrap();
            let after = average_precision(&inverted, &relevant).unwrap();
            prop_assert_eq!(before, 1.0);
            prop_assert!(after <= before);
        }
    }
}
