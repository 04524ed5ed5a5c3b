//! OOD detection metrics (AUROC, FPR at a target TPR, AUPR) and macro
//! averaged ID classification metrics, plus the result writers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ood::calibrate_tau;


/// Scores with binary labels (`true` = positive).
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl BinaryScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "labels",
                expected: scores.len(),
                found: labels.len(),
            });
        }
        if !labels.contains(&true) || !labels.contains(&false) {
            return Err(Error::Degenerate("need at least one positive and one negative".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::NonFinite("scores".into()));
        }
        Ok(Self { scores, labels })
    }

    /// ID scores as positives, OOD scores as negatives.
    pub fn from_split(positive: &[f64], negative: &[f64]) -> Result<Self> {
        let scores = positive.iter().chain(negative).copied().collect();
        let labels = std::iter::repeat_n(true, positive.len())
            .chain(std::iter::repeat_n(false, negative.len()))
            .collect();
        Self::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    fn positive_scores(&self) -> Vec<f64> {
        self.scores.iter().zip(&self.labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect()
    }

    /// Negated scores with flipped labels.
    pub fn flipped(&self) -> Self {
        Self {
            scores: self.scores.iter().map(|s| -s).collect(),
            labels: self.labels.iter().map(|l| !l).collect(),
        }
    }

    /// `(score, positives, negatives)` per distinct score, descending.
    fn groups(&self) -> Vec<(f64, usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut out: Vec<(f64, usize, usize)> = Vec::new();
        for i in idx {
            let s = self.scores[i];
            match out.last_mut() {
                Some(g) if g.0 == s => {
                    if self.labels[i] {
                        g.1 += 1;
                    } else {
                        g.2 += 1;
                    }
                }
                _ => out.push((s, self.labels[i] as usize, (!self.labels[i]) as usize)),
            }
        }
        out
    }
}

/// `P(s_pos > s_neg) + 0.5 P(s_pos = s_neg)`.
pub fn auroc(set: &BinaryScoredSet) -> f64 {
    // twice the Mann-Whitney U, kept in integers
    let mut u2: u128 = 0;
    let mut neg_below = set.negatives() as u128;
    for (_, p, n) in set.groups() {
        neg_below -= n as u128;
        u2 += 2 * p as u128 * neg_below + p as u128 * n as u128;
    }
    u2 as f64 / (2 * set.positives() as u128 * set.negatives() as u128) as f64
}

/// Fraction of negatives at or above the largest threshold that keeps
/// `tpr_target` of the positives.
pub fn fpr_at_tpr(set: &BinaryScoredSet, tpr_target: f64) -> Result<f64> {
    let tau = calibrate_tau(&set.positive_scores(), tpr_target)?;
    let fp = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(s, l)| !**l && **s >= tau)
        .count();
    Ok(fp as f64 / set.negatives() as f64)
}

/// Step-wise area under the precision-recall curve, positives as the
/// positive class: `sum (R_i - R_{i-1}) P_i` over descending thresholds.
pub fn aupr(set: &BinaryScoredSet) -> f64 {
    let total_pos = set.positives() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (_, p, n) in set.groups() {
        tp += p;
        fp += n;
        if p == 0 {
            continue;
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

/// AUPR with the negatives as the positive class, on negated scores.
pub fn aupr_out(set: &BinaryScoredSet) -> f64 {
    aupr(&set.flipped())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-class metrics and their unweighted means; empty denominators give 0.
pub fn classification_report(predictions: &[usize], truths: &[usize], classes: usize) -> Result<ClassificationReport> {
    if predictions.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            what: "predictions",
            expected: truths.len(),
            found: predictions.len(),
        });
    }
    if classes == 0 {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    if let Some(&bad) = predictions.iter().chain(truths).find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!("class {bad} outside 0..{classes}")));
    }
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        predicted[p] += 1;
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: support[c],
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / classes as f64;
    Ok(ClassificationReport {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        per_class,
    })
}

/// One evaluated scorer: OOD detection plus ID classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub fpr_at_95: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricReport {
    /// `id_scores` are positives, `ood_scores` negatives.
    pub fn compute(
        id_scores: &[f64],
        ood_scores: &[f64],
        predictions: &[usize],
        truths: &[usize],
        classes: usize,
        tpr_target: f64,
    ) -> Result<Self> {
        let set = BinaryScoredSet::from_split(id_scores, ood_scores)?;
        let cls = classification_report(predictions, truths, classes)?;
        Ok(Self {
            auroc: auroc(&set),
            fpr_at_95: fpr_at_tpr(&set, tpr_target)?,
            aupr_in: aupr(&set),
            aupr_out: aupr_out(&set),
            f1: cls.f1,
            recall: cls.recall,
            precision: cls.precision,
            per_class: cls.per_class,
        })
    }

    /// `key = value` lines, full precision.
    pub fn to_document(&self, prefix: &str) -> String {
        let mut s = String::new();
        for (k, v) in self.columns() {
            let _ = writeln!(s, "{prefix}{k} = {v}");
        }
        for (c, m) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                s,
                "{prefix}class{c}.precision = {}\n{prefix}class{c}.recall = {}\n{prefix}class{c}.f1 = {}\n{prefix}class{c}.support = {}",
                m.precision, m.recall, m.f1, m.support
            );
        }
        s
    }

    /// Values in table column order.
    pub fn columns(&self) -> [(&'static str, f64); 7] {
        [
            ("f1", self.f1),
            ("recall", self.recall),
            ("precision", self.precision),
            ("auroc", self.auroc),
            ("fpr_at_95", self.fpr_at_95),
            ("aupr_in", self.aupr_in),
            ("aupr_out", self.aupr_out),
        ]
    }
}

pub const CSV_HEADER: &str = "run,scorer,config_hash,F1,Recall,Precision,AUROC,FPR@95,AUPR-In,AUPR-Out";

/// One CSV row; metrics are written as percentages with two decimals.
pub fn csv_row(run: &str, scorer: &str, config_hash: &str, report: &MetricReport) -> String {
    let mut s = format!("{},{},{}", csv_field(run), csv_field(scorer), config_hash);
    for (_, v) in report.columns() {
        let _ = write!(s, ",{:.2}", 100.0 * v);
    }
    s
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}
