//! AUC, accuracy and sensitivity, and the stratified train/val/test splits.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bagdata::Label;
use crate::error::{Error, Result};
use crate::rng;

pub const NUM_FOLDS: usize = 4;
pub const TRAIN_FRACTION: f64 = 0.60;
pub const VAL_FRACTION: f64 = 0.15;
pub const TEST_FRACTION: f64 = 0.25;
pub const MIN_BAGS: usize = 8;

/// Rank-based (Mann-Whitney) ROC AUC; tied scores share their average rank.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            context: "auc labels",
            expected: scores.len(),
            found: labels.len(),
        });
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx].is_positive() {
                rank_sum_pos += avg;
            }
        }
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Accuracy and sensitivity (TPR of class 1) at `threshold`; a score at
/// or above the threshold predicts positive.
pub fn accuracy_sensitivity(scores: &[f64], labels: &[Label], threshold: f64) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            context: "accuracy labels",
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let mut correct = 0usize;
    let mut tp = 0usize;
    let mut positives = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        if predicted == l.is_positive() {
            correct += 1;
        }
        if l.is_positive() {
            positives += 1;
            if predicted {
                tp += 1;
            }
        }
    }
    if positives == 0 {
        return Err(Error::UndefinedMetric("sensitivity without positive bags".into()));
    }
    Ok((
        correct as f64 / scores.len() as f64,
        tp as f64 / positives as f64,
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Largest-remainder apportionment of `total` over `sizes`; ties broken
/// by `tie_keys`.
fn apportion(total: usize, sizes: &[usize], tie_keys: &[u64]) -> Vec<usize> {
    let all: usize = sizes.iter().sum();
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| total as f64 * s as f64 / all as f64)
        .collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(tie_keys[a].cmp(&tie_keys[b]))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if out[c] < sizes[c] {
            out[c] += 1;
            left -= 1;
        }
    }
    out
}

/// Four independent stratified random 60:15:25 splits.
pub fn make_folds(bag_ids: &[String], labels: &[Label], seed: u64) -> Result<Vec<FoldSplit>> {
    if bag_ids.len() != labels.len() {
        return Err(Error::Dimension {
            context: "fold labels",
            expected: bag_ids.len(),
            found: labels.len(),
        });
    }
    let total = bag_ids.len();
    let by_class: [Vec<usize>; 2] = [
        (0..total).filter(|&i| !labels[i].is_positive()).collect(),
        (0..total).filter(|&i| labels[i].is_positive()).collect(),
    ];
    if total < MIN_BAGS || by_class.iter().any(Vec::is_empty) {
        return Err(Error::TooFewBags(format!(
            "need at least {MIN_BAGS} bags with both classes present, have {total} ({} negative, {} positive)",
            by_class[0].len(),
            by_class[1].len()
        )));
    }
    let n_test = (TEST_FRACTION * total as f64).round() as usize;
    let n_val = (VAL_FRACTION * total as f64).round() as usize;
    let sizes = [by_class[0].len(), by_class[1].len()];

    (0..NUM_FOLDS)
        .map(|fold_id| {
            let mut r = rng::seeded(rng::tagged_seed(seed, "fold", fold_id as u64));
            let tie_keys = [r.random::<u64>(), r.random::<u64>()];
            let test_q = apportion(n_test, &sizes, &tie_keys);
            let rest: Vec<usize> = sizes.iter().zip(&test_q).map(|(s, t)| s - t).collect();
            let val_q = apportion(n_val, &rest, &tie_keys);
            let mut split = FoldSplit {
                fold_id,
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            };
            for c in 0..2 {
                let mut idx = by_class[c].clone();
                idx.shuffle(&mut r);
                let (test, rest) = idx.split_at(test_q[c]);
                let (val, train) = rest.split_at(val_q[c]);
                split.test.extend(test.iter().map(|&i| bag_ids[i].clone()));
                split.val.extend(val.iter().map(|&i| bag_ids[i].clone()));
                split.train.extend(train.iter().map(|&i| bag_ids[i].clone()));
            }
            for part in [&mut split.train, &mut split.val, &mut split.test] {
                part.sort();
            }
            Ok(split)
        })
        .collect()
}

/// Per-fold values with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len();
        let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            per_fold: values,
            mean,
            std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold_id: usize,
    /// Epoch (0-based) whose checkpoint had the best validation AUC, ties
    /// going to the lower validation BCE.
    pub best_epoch: usize,
    pub val_auc: f64,
    pub val_loss: f64,
    pub auc: f64,
    pub acc: f64,
    pub sen: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub auc: Summary,
    pub acc: Summary,
    pub sen: Summary,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Self {
        let auc = Summary::of(folds.iter().map(|f| f.auc).collect());
        let acc = Summary::of(folds.iter().map(|f| f.acc).collect());
        let sen = Summary::of(folds.iter().map(|f| f.sen).collect());
        Self { folds, auc, acc, sen }
    }
}
