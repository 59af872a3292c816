//! ROC-AUC as the Mann–Whitney probability that a positive outranks a
//! negative, with ties credited one half.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::labels::{LabelVector, PredictionVector, SequenceLabel};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc_auc scores"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Rank-sum AUC in `O(n log n)`; tied scores share their average rank.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // ranks are doubled so tie averages stay integral
    let mut pos_rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank2 = (i + 1 + j + 1) as u64;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        pos_rank_sum2 += avg_rank2 * tied_pos;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    // U statistic times 2: wins*2 + ties
    let u2 = pos_rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Explicit double loop over every positive/negative pair.
pub fn roc_auc_bruteforce(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut credit2: u64 = 0;
    for (si, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (sj, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            credit2 += match si.partial_cmp(sj) {
                Some(Ordering::Greater) => 2,
                Some(Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(credit2 as f64 / (2 * pos * neg) as f64)
}

/// Per-label one-vs-rest AUCs and their mean over the defined ones.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelAuc {
    pub per_label: Vec<(SequenceLabel, Option<f64>)>,
    pub mean: f64,
}

impl LabelAuc {
    pub fn undefined(&self) -> Vec<SequenceLabel> {
        self.per_label
            .iter()
            .filter(|(_, auc)| auc.is_none())
            .map(|(l, _)| *l)
            .collect()
    }

    pub fn get(&self, label: SequenceLabel) -> Option<f64> {
        self.per_label
            .iter()
            .find(|(l, _)| *l == label)
            .and_then(|(_, a)| *a)
    }
}

pub fn mean_label_auc(
    predictions: &[PredictionVector],
    labels: &[LabelVector],
    label_subset: &[SequenceLabel],
) -> Result<LabelAuc> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if label_subset.is_empty() {
        return Err(Error::InvalidArgument("empty label subset".into()));
    }
    let mut per_label = Vec::with_capacity(label_subset.len());
    for &label in label_subset {
        let scores: Vec<f64> = predictions.iter().map(|p| p.get(label)).collect();
        let truth: Vec<bool> = labels.iter().map(|y| y.label() == label).collect();
        let auc = match roc_auc(&scores, &truth) {
            Ok(v) => Some(v),
            Err(Error::UndefinedAuc(_)) => None,
            Err(e) => return Err(e),
        };
        per_label.push((label, auc));
    }
    let defined: Vec<f64> = per_label.iter().filter_map(|(_, a)| *a).collect();
    if defined.is_empty() {
        return Err(Error::UndefinedAuc(
            "no label in the subset has both positives and negatives".into(),
        ));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(LabelAuc { per_label, mean })
}
