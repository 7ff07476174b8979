//! Classification metrics, ROC/AUC, and k-fold splitting.
//!
//! Metric formulas follow the standard confusion-count definitions
//! (precision, recall, F1, accuracy, MCC). Zero denominators yield 0 with an
//! explicit flag rather than NaN, so reports stay total and machine-checkable.
//!
//! AUC uses a descending-score threshold sweep with tie grouping. The
//! trapezoid numerator is accumulated in integers (it equals
//! 2·concordant + ties over all positive/negative pairs) and divided once by
//! 2·P·N, so the sweep is bit-identical to the exhaustive pairwise
//! concordance computation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GfemError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// Which metrics hit a zero denominator (and were reported as 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedFlags {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub mcc: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub mcc: f64,
    pub flags: UndefinedFlags,
}

/// Count a binary prediction vector against labels (1 = positive).
pub fn confusion_counts(predictions: &[u8], labels: &[u8]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(GfemError::InvalidData(format!(
            "prediction/label length mismatch: {} vs {}",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(GfemError::InvalidData("empty prediction set".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p != 0, l != 0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, false) => c.true_neg += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(c)
}

/// Evaluate the five standard formulas over confusion counts.
pub fn compute_metrics(c: ConfusionCounts) -> MetricsReport {
    assert!(c.total() > 0, "metrics need at least one sample");
    let (tp, fp, tn, fn_) = (
        c.true_pos as f64,
        c.false_pos as f64,
        c.true_neg as f64,
        c.false_neg as f64,
    );
    let mut flags = UndefinedFlags::default();

    let precision = if tp + fp > 0.0 {
        tp / (tp + fp)
    } else {
        flags.precision = true;
        0.0
    };
    let recall = if tp + fn_ > 0.0 {
        tp / (tp + fn_)
    } else {
        flags.recall = true;
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        flags.f1 = true;
        0.0
    };
    let accuracy = (tp + tn) / (tp + tn + fp + fn_);
    let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = if mcc_den > 0.0 {
        (tp * tn - fp * fn_) / mcc_den
    } else {
        flags.mcc = true;
        0.0
    };
    MetricsReport {
        counts: c,
        precision,
        recall,
        f1,
        accuracy,
        mcc,
        flags,
    }
}

/// Row-normalized 2x2 confusion matrix `[[TN, FP], [FN, TP]] / row sums`.
/// An empty true-class row becomes zeros with its flag set.
pub fn confusion_matrix_normalized(c: ConfusionCounts) -> ([[f64; 2]; 2], [bool; 2]) {
    let neg_row = (c.true_neg + c.false_pos) as f64;
    let pos_row = (c.false_neg + c.true_pos) as f64;
    let mut m = [[0.0; 2]; 2];
    let mut empty = [false; 2];
    if neg_row > 0.0 {
        m[0] = [c.true_neg as f64 / neg_row, c.false_pos as f64 / neg_row];
    } else {
        empty[0] = true;
    }
    if pos_row > 0.0 {
        m[1] = [c.false_neg as f64 / pos_row, c.true_pos as f64 / pos_row];
    } else {
        empty[1] = true;
    }
    (m, empty)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (fpr, tpr) points from (0,0) to (1,1), nondecreasing in both.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Threshold-sweep ROC with tie grouping and integer-exact trapezoid AUC.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(GfemError::InvalidData(
            "score/label vectors must be nonempty and equal-length".into(),
        ));
    }
    let p: u64 = labels.iter().filter(|&&l| l != 0).count() as u64;
    let n: u64 = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(GfemError::InvalidData(
            "ROC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc_num: u64 = 0; // 2 * concordant + ties, accumulated exactly
    let mut i = 0;
    while i < order.len() {
        // One tie group of equal scores.
        let mut j = i;
        let (mut dtp, mut dfp) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            j += 1;
        }
        // Trapezoid over the group: width dfp, heights tp and tp+dtp.
        auc_num += dfp * (2 * tp + dtp);
        tp += dtp;
        fp += dfp;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
        i = j;
    }
    Ok(RocCurve {
        points,
        auc: auc_num as f64 / (2 * p * n) as f64,
    })
}

/// Per-fold curves interpolated on a fixed 101-point FPR grid, with a
/// mean ± 1.5σ band (population std across folds), clamped into [0, 1].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanRoc {
    pub fpr_grid: Vec<f64>,
    pub mean_tpr: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
}

fn interp_tpr(curve: &RocCurve, fpr: f64) -> f64 {
    let pts = &curve.points;
    if fpr <= 0.0 {
        return pts.first().map(|p| p.1).unwrap_or(0.0);
    }
    for w in pts.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if fpr <= x1 {
            if x1 == x0 {
                // Vertical segment: take the upper point.
                return y1;
            }
            return y0 + (y1 - y0) * (fpr - x0) / (x1 - x0);
        }
    }
    pts.last().map(|p| p.1).unwrap_or(1.0)
}

pub fn mean_roc_curve(folds: &[RocCurve]) -> Result<MeanRoc> {
    if folds.is_empty() {
        return Err(GfemError::InvalidData("no fold curves".into()));
    }
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let mut mean_tpr = Vec::with_capacity(grid.len());
    let mut lower = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    for &fpr in &grid {
        let tprs: Vec<f64> = folds.iter().map(|c| interp_tpr(c, fpr)).collect();
        let mean = tprs.iter().sum::<f64>() / tprs.len() as f64;
        let var = tprs.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / tprs.len() as f64;
        let sd = var.sqrt();
        mean_tpr.push(mean);
        lower.push((mean - 1.5 * sd).max(0.0));
        upper.push((mean + 1.5 * sd).min(1.0));
    }
    let aucs: Vec<f64> = folds.iter().map(|c| c.auc).collect();
    let mean_auc = aucs.iter().sum::<f64>() / aucs.len() as f64;
    let var_auc =
        aucs.iter().map(|a| (a - mean_auc) * (a - mean_auc)).sum::<f64>() / aucs.len() as f64;
    Ok(MeanRoc {
        fpr_grid: grid,
        mean_tpr,
        lower,
        upper,
        mean_auc,
        std_auc: var_auc.sqrt(),
    })
}

/// Deterministic k-fold split. Plain mode partitions indices with test sizes
/// differing by at most 1. Grouped mode keeps every group (subject) in one
/// fold, greedily balancing fold sample counts.
pub fn kfold_split(
    n: usize,
    k: usize,
    groups: Option<&[String]>,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || n < k {
        return Err(GfemError::InvalidData(format!(
            "cannot split {n} samples into {k} folds"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let fold_of: Vec<usize> = match groups {
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let base = n / k;
            let extra = n % k;
            let mut assignment = vec![0; n];
            let mut cursor = 0;
            for fold in 0..k {
                let size = base + usize::from(fold < extra);
                for &i in &idx[cursor..cursor + size] {
                    assignment[i] = fold;
                }
                cursor += size;
            }
            assignment
        }
        Some(groups) => {
            if groups.len() != n {
                return Err(GfemError::InvalidData(format!(
                    "group vector length {} != sample count {n}",
                    groups.len()
                )));
            }
            // Collect members per group in deterministic order, shuffle the
            // group list, then assign each group to the currently smallest
            // fold (ties to the lowest fold index).
            let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, g) in groups.iter().enumerate() {
                members.entry(g.as_str()).or_default().push(i);
            }
            if members.len() < k {
                return Err(GfemError::InvalidData(format!(
                    "only {} distinct groups for {k} folds",
                    members.len()
                )));
            }
            let mut group_list: Vec<&str> = members.keys().copied().collect();
            group_list.shuffle(&mut rng);
            let mut fold_sizes = vec![0usize; k];
            let mut assignment = vec![0; n];
            for g in group_list {
                let fold = (0..k).min_by_key(|&f| (fold_sizes[f], f)).unwrap();
                for &i in &members[g] {
                    assignment[i] = fold;
                    fold_sizes[fold] += 1;
                }
            }
            assignment
        }
    };
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        folds.push((train, test));
    }
    Ok(folds)
}
