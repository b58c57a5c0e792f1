//! Average precision, F1 and accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Tie-grouped average precision: a descending-score sweep in which every
/// run of equal scores is consumed as one block. `None` when there are no
/// positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length");
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut block_pos = 0;
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                block_pos += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        tp += block_pos;
        if block_pos > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += precision * block_pos as f64 / total_pos as f64;
        }
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// AP per class; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Unweighted mean of per-class AP over classes that have at least one positive.
pub fn mean_average_precision(scores: &Tensor, labels: &Tensor) -> Result<MapReport> {
    let (s, c) = scores.dims2("mean_average_precision")?;
    if labels.shape() != scores.shape() {
        return Err(Error::shape(
            "mean_average_precision",
            format!("scores {:?} vs labels {:?}", scores.shape(), labels.shape()),
        ));
    }
    let mut per_class = Vec::with_capacity(c);
    let mut excluded = Vec::new();
    for j in 0..c {
        let col: Vec<f64> = (0..s).map(|i| scores.get2(i, j)).collect();
        let lab: Vec<bool> = (0..s).map(|i| labels.get2(i, j) > 0.5).collect();
        let ap = average_precision(&col, &lab);
        if ap.is_none() {
            excluded.push(j);
        }
        per_class.push(ap);
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::EmptyInput("no class has a positive label".into()));
    }
    if !excluded.is_empty() {
        log::warn!("mAP excludes {} class(es) without positives: {:?}", excluded.len(), excluded);
    }
    Ok(MapReport {
        map: included.iter().sum::<f64>() / included.len() as f64,
        per_class,
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Macro,
    Micro,
}

fn f1_from_counts(tp: usize, fp: usize, fnn: usize) -> f64 {
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 of `score >= threshold` predictions against binary labels (S×C).
/// A class whose F1 has a zero denominator contributes 0.
pub fn f1(scores: &Tensor, labels: &Tensor, threshold: f64, averaging: Averaging) -> Result<f64> {
    let (s, c) = scores.dims2("f1")?;
    if labels.shape() != scores.shape() {
        return Err(Error::shape(
            "f1",
            format!("scores {:?} vs labels {:?}", scores.shape(), labels.shape()),
        ));
    }
    let mut counts = vec![(0usize, 0usize, 0usize); c];
    for i in 0..s {
        for (j, cnt) in counts.iter_mut().enumerate() {
            let pred = scores.get2(i, j) >= threshold;
            let truth = labels.get2(i, j) > 0.5;
            match (pred, truth) {
                (true, true) => cnt.0 += 1,
                (true, false) => cnt.1 += 1,
                (false, true) => cnt.2 += 1,
                (false, false) => {}
            }
        }
    }
    Ok(match averaging {
        Averaging::Macro => {
            counts.iter().map(|&(tp, fp, fnn)| f1_from_counts(tp, fp, fnn)).sum::<f64>() / c.max(1) as f64
        }
        Averaging::Micro => {
            let (tp, fp, fnn) = counts
                .iter()
                .fold((0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
            f1_from_counts(tp, fp, fnn)
        }
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let (s, c) = scores.dims2("accuracy")?;
    if labels.len() != s {
        return Err(Error::shape(
            "accuracy",
            format!("{s} score rows vs {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Param(format!("label {bad} out of range for {c} classes")));
    }
    if s == 0 {
        return Err(Error::EmptyInput("accuracy over zero samples".into()));
    }
    let hits = (0..s).filter(|&i| argmax(scores.row(i)) == labels[i]).count();
    Ok(hits as f64 / s as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking_is_one() {
        let ap = average_precision(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn single_positive_at_rank_r() {
        for r in 1..=6 {
            let scores: Vec<f64> = (0..6).map(|i| 10.0 - i as f64).collect();
            let labels: Vec<bool> = (0..6).map(|i| i + 1 == r).collect();
            let ap = average_precision(&scores, &labels).unwrap();
            assert!((ap - 1.0 / r as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_are_one_block() {
        // All scores equal: precision is the positive rate.
        let ap = average_precision(&[0.5; 4], &[true, false, false, false]).unwrap();
        assert_eq!(ap, 0.25);
    }

    #[test]
    fn no_positive_class_is_excluded() {
        let scores = Tensor::matrix(3, 2, vec![0.9, 0.1, 0.2, 0.3, 0.1, 0.8]).unwrap();
        let labels = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let rep = mean_average_precision(&scores, &labels).unwrap();
        assert_eq!(rep.excluded, vec![1]);
        assert_eq!(rep.map, 1.0);
    }

    #[test]
    fn f1_hand_cases() {
        let labels = Tensor::matrix(4, 1, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        // TP=2, FP=1, FN=1
        let scores = Tensor::matrix(4, 1, vec![0.9, 0.8, 0.1, 0.7]).unwrap();
        for avg in [Averaging::Macro, Averaging::Micro] {
            assert!((f1(&scores, &labels, 0.5, avg).unwrap() - 2.0 / 3.0).abs() < 1e-15);
            assert_eq!(f1(&labels, &labels, 0.5, avg).unwrap(), 1.0);
            assert_eq!(f1(&Tensor::zeros(&[4, 1]), &labels, 0.5, avg).unwrap(), 0.0);
        }
    }

    #[test]
    fn accuracy_hand_cases() {
        let s = Tensor::matrix(4, 2, vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7]).unwrap();
        assert_eq!(accuracy(&s, &[0, 1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&s, &[0, 1, 0, 0]).unwrap(), 0.75);
        let uniform = Tensor::full(&[3, 4], 0.25);
        assert_eq!(accuracy(&uniform, &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&uniform, &[1, 0, 0]).unwrap(), 2.0 / 3.0);
    }
}
