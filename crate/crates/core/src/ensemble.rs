//! Trace-level aggregation of segment probabilities and the convex
//! combination of two behaviour models.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataset::Label;
use crate::eval::{confusion, EvalError, Prediction};
use crate::model::SegmentProbability;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("trace has no segment probabilities")]
    EmptyTrace,
    #[error("segment probabilities belong to more than one trace ({0} and {1})")]
    MixedTraces(String, String),
    #[error("probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("threshold {0} is outside [0, 1]")]
    ThresholdOutOfRange(f64),
    #[error("alpha {0} is outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("inputs are not aligned: {0}")]
    MisalignedInputs(String),
    #[error("alpha grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleVerdict {
    pub trace_id: String,
    pub p_bar: f64,
    pub threshold: f64,
    pub decision: Label,
}

impl EnsembleVerdict {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.trace_id, self.p_bar, self.threshold, self.decision
        )
    }
}

/// Renders a verdict report: one `trace_id,p_bar,threshold,decision` line per
/// trace.
pub fn verdicts_to_text(verdicts: &[EnsembleVerdict]) -> String {
    let mut out = String::new();
    for v in verdicts {
        let _ = writeln!(out, "{}", v.to_line());
    }
    out
}

/// Correctly rounded sum of `values` (Shewchuk's exact partials). The result
/// does not depend on the order of the values and never decreases when one of
/// them increases.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }

    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Round half-way cases using the sign of the next partial.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Mean of probabilities in `[0, 1]`, clamped to `[min, max]` of the inputs.
pub fn mean_probability(values: &[f64]) -> Result<f64, EnsembleError> {
    if values.is_empty() {
        return Err(EnsembleError::EmptyTrace);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &p in values {
        check_probability(p)?;
        lo = lo.min(p);
        hi = hi.max(p);
    }
    Ok((exact_sum(values.iter().copied()) / values.len() as f64).clamp(lo, hi))
}

fn check_probability(p: f64) -> Result<(), EnsembleError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(EnsembleError::ProbabilityOutOfRange(p))
    }
}

/// Malicious iff the mean strictly exceeds the threshold.
pub fn decide(p_bar: f64, threshold: f64) -> Label {
    if p_bar > threshold {
        Label::Malicious
    } else {
        Label::Benign
    }
}

pub fn aggregate(
    probs: &[SegmentProbability],
    threshold: f64,
) -> Result<EnsembleVerdict, EnsembleError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(EnsembleError::ThresholdOutOfRange(threshold));
    }
    let first = probs.first().ok_or(EnsembleError::EmptyTrace)?;
    if let Some(other) = probs.iter().find(|p| p.trace_id != first.trace_id) {
        return Err(EnsembleError::MixedTraces(
            first.trace_id.clone(),
            other.trace_id.clone(),
        ));
    }
    let values: Vec<f64> = probs.iter().map(|p| p.p_malicious).collect();
    let p_bar = mean_probability(&values)?;
    Ok(EnsembleVerdict {
        trace_id: first.trace_id.clone(),
        p_bar,
        threshold,
        decision: decide(p_bar, threshold),
    })
}

/// `alpha · p_low + (1 − alpha) · p_high`. Exact at both ends of the alpha
/// range and kept within `[min, max]` of the two inputs.
pub fn convex_combine(p_low: f64, p_high: f64, alpha: f64) -> Result<f64, EnsembleError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EnsembleError::AlphaOutOfRange(alpha));
    }
    check_probability(p_low)?;
    check_probability(p_high)?;
    let mixed = alpha * p_low + (1.0 - alpha) * p_high;
    Ok(mixed.clamp(p_low.min(p_high), p_low.max(p_high)))
}

fn check_aligned(
    low: &[SegmentProbability],
    high: &[SegmentProbability],
) -> Result<(), EnsembleError> {
    if low.len() != high.len() {
        return Err(EnsembleError::MisalignedInputs(format!(
            "{} low-model rows vs {} high-model rows",
            low.len(),
            high.len()
        )));
    }
    for (i, (l, h)) in low.iter().zip(high).enumerate() {
        if l.trace_id != h.trace_id || l.segment_index != h.segment_index {
            return Err(EnsembleError::MisalignedInputs(format!(
                "row {i}: ({}, {}) vs ({}, {})",
                l.trace_id, l.segment_index, h.trace_id, h.segment_index
            )));
        }
    }
    Ok(())
}

/// Per-segment convex combination of two aligned probability lists.
pub fn combine_segments(
    low: &[SegmentProbability],
    high: &[SegmentProbability],
    alpha: f64,
) -> Result<Vec<SegmentProbability>, EnsembleError> {
    check_aligned(low, high)?;
    low.iter()
        .zip(high)
        .map(|(l, h)| {
            Ok(SegmentProbability {
                trace_id: l.trace_id.clone(),
                segment_index: l.segment_index,
                p_malicious: convex_combine(l.p_malicious, h.p_malicious, alpha)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub accuracy: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Alphas whose (accuracy, FPR) no other row dominates: none is at least as
    /// good on both and strictly better on one.
    pub pareto: Vec<f64>,
    /// Smallest and largest Pareto-optimal alpha.
    pub recommended: (f64, f64),
}

impl SweepReport {
    /// `alpha,accuracy,fpr` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.alpha, r.accuracy, r.fpr);
        }
        out
    }
}

/// Evenly spaced grid over `[0, 1]` with `steps` intervals.
pub fn alpha_grid(steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Segment-level accuracy and FPR of the combined model for every alpha in
/// `grid`.
pub fn sweep_alpha(
    low: &[SegmentProbability],
    high: &[SegmentProbability],
    labels: &[Label],
    grid: &[f64],
    threshold: f64,
) -> Result<SweepReport, EnsembleError> {
    if grid.is_empty() {
        return Err(EnsembleError::EmptyGrid);
    }
    check_aligned(low, high)?;
    if labels.len() != low.len() {
        return Err(EnsembleError::MisalignedInputs(format!(
            "{} labels for {} segments",
            labels.len(),
            low.len()
        )));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let preds = combine_segments(low, high, alpha)?
            .iter()
            .zip(labels)
            .map(|(p, &label)| Prediction {
                p: p.p_malicious,
                label,
            })
            .collect::<Vec<_>>();
        let c = confusion(&preds, threshold)?;
        rows.push(SweepRow {
            alpha,
            accuracy: c.accuracy(),
            fpr: c.fpr(),
        });
    }
    let pareto: Vec<f64> = rows
        .iter()
        .filter(|r| {
            !rows.iter().any(|o| {
                o.accuracy >= r.accuracy
                    && o.fpr <= r.fpr
                    && (o.accuracy > r.accuracy || o.fpr < r.fpr)
            })
        })
        .map(|r| r.alpha)
        .collect();
    let recommended = pareto
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
            (lo.min(a), hi.max(a))
        });
    Ok(SweepReport {
        rows,
        pareto,
        recommended,
    })
}
