//! Mean average precision and class-balanced accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Map,
    Accuracy,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(MetricKind::Map),
            "accuracy" => Ok(MetricKind::Accuracy),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: MetricKind,
    /// AP or recall per class; `None` where undefined.
    pub per_class: Vec<Option<f64>>,
    /// Mean of the defined per-class values.
    pub aggregate: f64,
    /// Classes left out of the aggregate because they had no positives.
    pub excluded_classes: Vec<usize>,
    /// `confusion[true][predicted]`, for accuracy reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<usize>>>,
}

/// Average precision of one ranked list: precision at the rank of every
/// positive, averaged over positives. Items are ranked by descending score,
/// ties by ascending id. `None` when there are no positives.
pub fn average_precision(scores: &[f64], relevant: &[bool], ids: &[&str]) -> Option<f64> {
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(ids[b])));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

/// Per-class AP over videos (rows of `scores`) and their mean.
pub fn evaluate_map(scores: &Matrix, label_sets: &[Vec<usize>], ids: &[String]) -> Result<EvalReport> {
    let (n, c) = scores.shape();
    if label_sets.len() != n || ids.len() != n {
        return Err(Error::shape("evaluate_map", format!("{n} score rows, {} label sets, {} ids", label_sets.len(), ids.len())));
    }
    if let Some(l) = label_sets.iter().flatten().find(|&&l| l >= c) {
        return Err(Error::Label(format!("label {l} out of range for {c} classes")));
    }
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let mut per_class = Vec::with_capacity(c);
    let mut excluded = Vec::new();
    for j in 0..c {
        let col: Vec<f64> = (0..n).map(|i| scores.get(i, j)).collect();
        let rel: Vec<bool> = label_sets.iter().map(|s| s.contains(&j)).collect();
        let ap = average_precision(&col, &rel, &id_refs);
        if ap.is_none() {
            excluded.push(j);
        }
        per_class.push(ap);
    }
    let aggregate = mean_defined(&per_class).ok_or_else(|| Error::Label("no class has a positive video".into()))?;
    Ok(EvalReport { metric: MetricKind::Map, per_class, aggregate, excluded_classes: excluded, confusion: None })
}

/// Mean per-class recall for single-label predictions.
pub fn evaluate_accuracy(predictions: &[usize], labels: &[usize], classes: usize) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("evaluate_accuracy", format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::Label(format!("class index out of range for {classes} classes")));
        }
        confusion[l][p] += 1;
    }
    let mut per_class = Vec::with_capacity(classes);
    for (j, row) in confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total == 0 {
            return Err(Error::Label(format!("class {j} has no evaluation samples")));
        }
        per_class.push(Some(row[j] as f64 / total as f64));
    }
    let aggregate = mean_defined(&per_class).ok_or_else(|| Error::Label("no classes".into()))?;
    Ok(EvalReport { metric: MetricKind::Accuracy, per_class, aggregate, excluded_classes: Vec::new(), confusion: Some(confusion) })
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return None;
    }
    Some(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::seeded_rng;
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i:03}")).collect()
    }

    #[test]
    fn ap_examples() {
        let names = ["a", "b", "c"];
        assert_eq!(average_precision(&[0.9, 0.8, 0.7], &[true, true, false], &names), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true], &names).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let names: Vec<String> = ids(7);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut rel = vec![false; 7];
        rel[6] = true;
        let scores: Vec<f64> = (0..7).map(|i| 1.0 - i as f64 / 10.0).collect();
        assert_eq!(average_precision(&scores, &rel, &refs), Some(1.0 / 7.0));
        assert_eq!(average_precision(&scores, &[false; 7], &refs), None);
    }

    #[test]
    fn ties_break_by_id() {
        // Equal scores: "a" (negative) ranks before "b" (positive).
        let ap = average_precision(&[0.5, 0.5], &[false, true], &["b", "a"]);
        assert_eq!(ap, Some(1.0));
        let ap = average_precision(&[0.5, 0.5], &[true, false], &["b", "a"]);
        assert_eq!(ap, Some(0.5));
    }

    /// Walks every cutoff of the ranked list and sums precision where recall
    /// increases.
    fn brute_force_ap(scores: &[f64], rel: &[bool], ids: &[String]) -> Option<f64> {
        let n = scores.len();
        let pos = rel.iter().filter(|&&r| r).count();
        if pos == 0 {
            return None;
        }
        let mut ranked: Vec<(f64, &String, bool)> = (0..n).map(|i| (scores[i], &ids[i], rel[i])).collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let mut table = Vec::new();
        for cutoff in 1..=n {
            let tp = ranked[..cutoff].iter().filter(|r| r.2).count();
            table.push((tp as f64 / cutoff as f64, tp as f64 / pos as f64));
        }
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for (precision, recall) in table {
            if recall > prev_recall {
                ap += precision * (recall - prev_recall);
                prev_recall = recall;
            }
        }
        Some(ap)
    }

    #[test]
    fn map_matches_brute_force() {
        let mut rng = seeded_rng(5);
        for _ in 0..100 {
            let n = rng.random_range(2..25);
            let c = rng.random_range(1..5);
            let scores: Vec<f64> = (0..n * c).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let m = Matrix::new(n, c, scores).unwrap();
            let sets: Vec<Vec<usize>> = (0..n).map(|_| (0..c).filter(|_| rng.random_bool(0.4)).collect()).collect();
            let names = ids(n);
            let Ok(report) = evaluate_map(&m, &sets, &names) else { continue };
            let mut oracle = Vec::new();
            for j in 0..c {
                let col: Vec<f64> = (0..n).map(|i| m.get(i, j)).collect();
                let rel: Vec<bool> = sets.iter().map(|s| s.contains(&j)).collect();
                let want = brute_force_ap(&col, &rel, &names);
                match (report.per_class[j], want) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                    (None, None) => {}
                    other => panic!("{other:?}"),
                }
                oracle.extend(want);
            }
            let mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
            assert!((report.aggregate - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn map_reports_excluded_classes() {
        let m = Matrix::new(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let r = evaluate_map(&m, &[vec![0], vec![0]], &ids(2)).unwrap();
        assert_eq!(r.excluded_classes, vec![1]);
        assert_eq!(r.per_class, vec![Some(1.0), None]);
        assert_eq!(r.aggregate, 1.0);
    }

    #[test]
    fn accuracy_examples() {
        let r = evaluate_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(r.aggregate, 1.0);
        let r = evaluate_accuracy(&[0, 0, 0], &[0, 0, 1], 2).unwrap();
        assert_eq!(r.aggregate, 0.5);
        assert_eq!(r.confusion, Some(vec![vec![2, 0], vec![1, 0]]));
        assert!(evaluate_accuracy(&[0], &[0], 2).is_err());
    }

    #[test]
    fn accuracy_is_permutation_invariant_and_balanced() {
        let mut rng = seeded_rng(8);
        let labels: Vec<usize> = (0..60).map(|i| i % 4).collect();
        let preds: Vec<usize> = (0..60).map(|_| rng.random_range(0..4)).collect();
        let base = evaluate_accuracy(&preds, &labels, 4).unwrap();
        let perm = [2, 0, 3, 1];
        let pl: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let moved = evaluate_accuracy(&pp, &pl, 4).unwrap();
        assert!((base.aggregate - moved.aggregate).abs() < 1e-15);
        // Equal class counts: balanced accuracy equals overall accuracy.
        let overall = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / 60.0;
        assert!((base.aggregate - overall).abs() < 1e-12);
    }
}
