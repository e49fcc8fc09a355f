//! Metrics over segment-level and trace-level predictions.
//!
//! Malicious is the positive class everywhere: a false positive is a benign
//! item flagged malicious. An item is predicted malicious iff its probability
//! strictly exceeds the threshold, the same rule the ensemble uses.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::Label;

/// Combined sample size up to which [`rank_sum_test`] enumerates the exact
/// permutation distribution.
pub const EXACT_RANK_SUM_LIMIT: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    EmptyInput,
    #[error("ROC needs both classes, got {positives} malicious and {negatives} benign")]
    SingleClass { positives: usize, negatives: usize },
    #[error("rank-sum test needs two non-empty samples")]
    EmptySample,
    #[error("value {0} is not a finite number")]
    NotFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Malicious probability.
    pub p: f64,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// FP / (FP + TN); 0 when there are no benign items.
    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    /// TP / (TP + FN); 0 when there are no malicious items.
    pub fn tpr(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(preds: &[Prediction], threshold: f64) -> Result<Confusion, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut c = Confusion::default();
    for pred in preds {
        if !pred.p.is_finite() {
            return Err(EvalError::NotFinite(pred.p));
        }
        match (pred.p > threshold, pred.label) {
            (true, Label::Malicious) => c.tp += 1,
            (true, Label::Benign) => c.fp += 1,
            (false, Label::Benign) => c.tn += 1,
            (false, Label::Malicious) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Roc {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC by sweeping the threshold over the distinct scores (equal scores form
/// one step) and AUC by the trapezoidal rule. The area is accumulated in
/// integer units of `1 / (2·P·N)`, so it equals the fraction of correctly
/// ordered malicious/benign pairs (ties counted ½) up to one final rounding.
pub fn roc_auc(preds: &[Prediction]) -> Result<Roc, EvalError> {
    let positives = preds.iter().filter(|p| p.label.is_malicious()).count();
    let negatives = preds.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass {
            positives,
            negatives,
        });
    }
    if let Some(bad) = preds.iter().find(|p| !p.p.is_finite()) {
        return Err(EvalError::NotFinite(bad.p));
    }
    let mut sorted: Vec<&Prediction> = preds.iter().collect();
    sorted.sort_by(|a, b| b.p.total_cmp(&a.p));

    let (pos, neg) = (positives as f64, negatives as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut twice_area = 0u128;
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].p;
        let (mut dtp, mut dfp) = (0u128, 0u128);
        while i < sorted.len() && sorted[i].p == score {
            if sorted[i].label.is_malicious() {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        twice_area += dfp * (2 * tp + dtp);
        tp += dtp;
        fp += dfp;
        points.push((fp as f64 / neg, tp as f64 / pos));
    }
    let auc = twice_area as f64 / (2 * positives as u128 * negatives as u128) as f64;
    Ok(Roc { points, auc })
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySample);
    }
    if let Some(&bad) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(EvalError::NotFinite(bad));
    }
    Ok(())
}

/// Twice the mid-ranks of the pooled sample (integers), in pooled order, and
/// the tie-group sizes.
fn doubled_midranks(pooled: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&x, &y| pooled[x].total_cmp(&pooled[y]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2.
        let twice = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = twice;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided p-value from the exact permutation distribution of the rank sum
/// of `a` (mid-ranks for ties).
pub fn rank_sum_exact(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check_samples(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, _) = doubled_midranks(&pooled);
    let (na, n) = (a.len(), pooled.len());
    let observed: u64 = ranks[..na].iter().sum();
    let centre = (na * (n + 1)) as i64;
    let deviation = (observed as i64 - centre).abs();

    // ways[j][s]: subsets of size j with doubled rank sum s.
    let max_sum: usize = ranks.iter().map(|&r| r as usize).sum();
    let mut ways = vec![vec![0f64; max_sum + 1]; na + 1];
    ways[0][0] = 1.0;
    for &r in &ranks {
        let r = r as usize;
        for j in (1..=na).rev() {
            let (lower, upper) = ways.split_at_mut(j);
            for s in (r..=max_sum).rev() {
                upper[0][s] += lower[j - 1][s - r];
            }
        }
    }
    let total: f64 = ways[na].iter().sum();
    let extreme: f64 = ways[na]
        .iter()
        .enumerate()
        .filter(|&(s, _)| (s as i64 - centre).abs() >= deviation)
        .map(|(_, &w)| w)
        .sum();
    Ok((extreme / total).min(1.0))
}

/// Two-sided p-value from the normal approximation with tie and continuity
/// corrections.
pub fn rank_sum_normal(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    check_samples(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_midranks(&pooled);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let w = ranks[..a.len()].iter().sum::<u64>() as f64 / 2.0;
    let mean = na * (n + 1.0) / 2.0;
    let tie_term: f64 =
        ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0)).max(1.0);
    let variance = na * nb / 12.0 * ((n + 1.0) - tie_term);
    if variance <= 0.0 {
        return Ok(1.0);
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / variance.sqrt();
    Ok(libm::erfc(z / std::f64::consts::SQRT_2).min(1.0))
}

/// Two-sided Wilcoxon rank-sum test: exact for combined size up to
/// [`EXACT_RANK_SUM_LIMIT`], normal approximation above.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() + b.len() <= EXACT_RANK_SUM_LIMIT {
        rank_sum_exact(a, b)
    } else {
        rank_sum_normal(a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Mean, extremes and quartiles (linear interpolation between order
/// statistics).
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |f: f64| {
        let pos = f * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some(Summary {
        count: v.len(),
        mean: crate::ensemble::exact_sum(v.iter().copied()) / v.len() as f64,
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
    })
}

/// Counts of `values` in `bins` equal-width bins over `[0, 1]`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let bins = bins.max(1);
    let mut counts = vec![0; bins];
    for &v in values {
        let i = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub fpr: f64,
    pub auc: Option<f64>,
    pub roc_points: Vec<(f64, f64)>,
}

impl MetricsReport {
    /// Confusion at `threshold` plus ROC/AUC when both classes are present.
    pub fn compute(preds: &[Prediction], threshold: f64) -> Result<Self, EvalError> {
        let confusion = confusion(preds, threshold)?;
        let roc = match roc_auc(preds) {
            Ok(roc) => Some(roc),
            Err(EvalError::SingleClass { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            threshold,
            confusion,
            accuracy: confusion.accuracy(),
            fpr: confusion.fpr(),
            auc: roc.as_ref().map(|r| r.auc),
            roc_points: roc.map(|r| r.points).unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummaries {
    pub benign: Option<Summary>,
    pub malicious: Option<Summary>,
    pub benign_histogram: Vec<usize>,
    pub malicious_histogram: Vec<usize>,
}

/// The JSON metrics document written by the `evaluate` command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub config: BTreeMap<String, String>,
    pub segments: MetricsReport,
    pub traces: MetricsReport,
    /// Summaries of the trace-level mean malicious probability per true class.
    pub ensemble_probability: ClassSummaries,
    /// Two-sided rank-sum p-value between the benign and malicious traces'
    /// mean probabilities; absent unless both classes are present.
    pub rank_sum_p_value: Option<f64>,
}

impl EvaluationReport {
    pub fn build(
        config: BTreeMap<String, String>,
        segment_preds: &[Prediction],
        trace_preds: &[Prediction],
        threshold: f64,
    ) -> Result<Self, EvalError> {
        let split = |label: Label| -> Vec<f64> {
            trace_preds
                .iter()
                .filter(|p| p.label == label)
                .map(|p| p.p)
                .collect()
        };
        let (benign, malicious) = (split(Label::Benign), split(Label::Malicious));
        let rank_sum_p_value = if benign.is_empty() || malicious.is_empty() {
            None
        } else {
            Some(rank_sum_test(&benign, &malicious)?)
        };
        Ok(EvaluationReport {
            config,
            segments: MetricsReport::compute(segment_preds, threshold)?,
            traces: MetricsReport::compute(trace_preds, threshold)?,
            ensemble_probability: ClassSummaries {
                benign: summarize(&benign),
                malicious: summarize(&malicious),
                benign_histogram: histogram(&benign, 10),
                malicious_histogram: histogram(&malicious, 10),
            },
            rank_sum_p_value,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is always serializable");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Benign as B, Malicious as M};

    fn preds(ps: &[f64], labels: &[Label]) -> Vec<Prediction> {
        ps.iter()
            .zip(labels)
            .map(|(&p, &label)| Prediction { p, label })
            .collect()
    }

    #[test]
    fn confusion_examples() {
        let labels: Vec<Label> = (0..10).map(|i| if i < 5 { B } else { M }).collect();
        let perfect: Vec<f64> = (0..10).map(|i| if i < 5 { 0.1 } else { 0.9 }).collect();
        let c = confusion(&preds(&perfect, &labels), 0.5).unwrap();
        assert_eq!((c.accuracy(), c.fpr()), (1.0, 0.0));

        let c = confusion(&preds(&[0.0; 4], &[M; 4]), 0.5).unwrap();
        assert_eq!(c.accuracy(), 0.0);
        assert_eq!(c.fpr(), 0.0);

        let c = confusion(
            &preds(&[0.1, 0.4, 0.6, 0.9, 0.2, 0.8], &[B, B, M, M, B, M]),
            0.5,
        )
        .unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 3,
                fp: 0,
                tn: 3,
                fn_: 0
            }
        );
        assert_eq!((c.accuracy(), c.fpr()), (1.0, 0.0));

        let c = confusion(&preds(&[0.5], &[B]), 0.5).unwrap();
        assert_eq!(c.tn, 1);
        assert_eq!(confusion(&[], 0.5), Err(EvalError::EmptyInput));
    }

    #[test]
    fn auc_examples() {
        let roc = roc_auc(&preds(&[0.1, 0.2, 0.8, 0.9], &[B, B, M, M])).unwrap();
        assert_eq!(roc.auc, 1.0);
        let roc = roc_auc(&preds(&[0.5; 4], &[B, M, B, M])).unwrap();
        assert_eq!(roc.auc, 0.5);
        assert_eq!(roc.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        let roc = roc_auc(&preds(&[0.1, 0.4, 0.6, 0.9], &[B, M, B, M])).unwrap();
        assert_eq!(roc.auc, 0.75);
        assert_eq!(
            roc.points,
            vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]
        );
        assert_eq!(
            roc_auc(&preds(&[0.1], &[B])),
            Err(EvalError::SingleClass {
                positives: 0,
                negatives: 1
            })
        );
    }

    #[test]
    fn rank_sum_examples() {
        assert!((rank_sum_exact(&[1.0, 2.0], &[3.0, 4.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            rank_sum_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
            1.0
        );
        let a: Vec<f64> = (1..=10).map(f64::from).collect();
        let b: Vec<f64> = (11..=20).map(f64::from).collect();
        let p = rank_sum_test(&a, &b).unwrap();
        assert!((p - 2.0 / 184_756.0).abs() < 1e-18, "{p}");
        assert_eq!(rank_sum_test(&[], &[1.0]), Err(EvalError::EmptySample));
        assert_eq!(rank_sum_normal(&[2.0; 15], &[2.0; 15]).unwrap(), 1.0);
    }

    #[test]
    fn rank_sum_with_ties_matches_enumeration() {
        // a = {1, 2, 2}, b = {2, 3}: pooled mid-ranks 1, 3, 3, 3, 5.
        // Doubled ranks 2, 6, 6, 6, 10; observed doubled sum 14, centre 18.
        // Size-3 subsets (10 total) with |sum - 18| >= 4: {2,6,6} x3 = 14,
        // {6,6,10} x3 = 22 -> 6 of 10.
        let p = rank_sum_exact(&[1.0, 2.0, 2.0], &[2.0, 3.0]).unwrap();
        assert!((p - 0.6).abs() < 1e-15, "{p}");
    }

    #[test]
    fn summary_and_histogram() {
        let s = summarize(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(
            (s.min, s.q1, s.median, s.q3, s.max, s.mean),
            (1.0, 2.0, 3.0, 4.0, 5.0, 3.0)
        );
        assert!(summarize(&[]).is_none());
        assert_eq!(
            histogram(&[0.0, 0.05, 0.5, 1.0], 10),
            vec![2, 0, 0, 0, 0, 1, 0, 0, 0, 1]
        );
    }

    #[test]
    fn report_json_shape() {
        let seg = preds(&[0.1, 0.9, 0.8], &[B, M, M]);
        let tr = preds(&[0.1, 0.85], &[B, M]);
        let report = EvaluationReport::build(BTreeMap::new(), &seg, &tr, 0.5).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(v["traces"]["confusion"]["fn"], 0);
        assert_eq!(v["segments"]["auc"], 1.0);
        assert_eq!(v["traces"]["roc_points"][0], serde_json::json!([0.0, 0.0]));
        assert!(v["rank_sum_p_value"].is_number());
        assert_eq!(v["ensemble_probability"]["benign"]["count"], 1);
    }
}
