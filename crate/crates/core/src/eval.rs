//! Window-level detection metrics: ROC AUC, best-F1 threshold search and
//! threshold transfer from validation to test.
//!
//! Scores are oriented so that higher means more anomalous, and a window is
//! predicted anomalous when `score >= threshold`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
    #[error("metric needs both classes; got {anomalies} anomalies and {normals} normals")]
    SingleClass { anomalies: usize, normals: usize },
    #[error("threshold mode '{0}' needs a validation set")]
    MissingValidation(&'static str),
}

/// Scores with their ground truth (`true` = anomaly).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, EvalError> {
        if scores.len() != labels.len() {
            return Err(EvalError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
            return Err(EvalError::NonFinite { index });
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn anomalies(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    fn require_both_classes(&self) -> Result<(usize, usize), EvalError> {
        let anomalies = self.anomalies();
        let normals = self.len() - anomalies;
        if anomalies == 0 || normals == 0 {
            return Err(EvalError::SingleClass { anomalies, normals });
        }
        Ok((anomalies, normals))
    }

    /// Indices sorted by descending score.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }
}

/// Probability that a random anomaly outscores a random normal window, ties
/// counting one half.
///
/// Computed exactly as the integer `2U` statistic over sorted tie groups, so
/// the result is the same rational a pairwise count would give.
pub fn auc(scored: &ScoredSet) -> Result<f64, EvalError> {
    let (pos, neg) = scored.require_both_classes()?;
    let mut idx = scored.descending();
    idx.reverse();
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let s = scored.scores[idx[i]];
        let (mut p, mut n) = (0u128, 0u128);
        while i < idx.len() && scored.scores[idx[i]] == s {
            if scored.labels[idx[i]] {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        twice_u += p * (2 * neg_below + n);
        neg_below += n;
    }
    Ok(twice_u as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// F1, precision and recall at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
}

impl ThresholdMetrics {
    fn from_counts(tp: usize, fp: usize, positives: usize, threshold: f64) -> Self {
        let fn_ = positives - tp;
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, positives),
            threshold,
        }
    }
}

/// Metrics when predicting anomaly for `score >= threshold`.
pub fn metrics_at(scored: &ScoredSet, threshold: f64) -> ThresholdMetrics {
    let positives = scored.anomalies();
    let (mut tp, mut fp) = (0, 0);
    for (&s, &l) in scored.scores.iter().zip(&scored.labels) {
        if s >= threshold {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    ThresholdMetrics::from_counts(tp, fp, positives, threshold)
}

/// Sweeps every distinct score as a threshold and keeps the best F1; ties
/// go to the higher threshold.
pub fn best_f1(scored: &ScoredSet) -> Result<ThresholdMetrics, EvalError> {
    let (positives, _) = scored.require_both_classes()?;
    let idx = scored.descending();
    let (mut tp, mut fp) = (0, 0);
    let mut best: Option<ThresholdMetrics> = None;
    let mut i = 0;
    while i < idx.len() {
        let s = scored.scores[idx[i]];
        while i < idx.len() && scored.scores[idx[i]] == s {
            if scored.labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let m = ThresholdMetrics::from_counts(tp, fp, positives, s);
        if best.is_none_or(|b| m.f1 > b.f1) {
            best = Some(m);
        }
    }
    Ok(best.expect("non-empty set"))
}

/// Test-set metrics at a threshold picked on validation data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub auc: f64,
    /// Absent in AUC-only mode.
    pub at_threshold: Option<ThresholdMetrics>,
}

/// Chooses the best-F1 threshold on `val` and applies it unchanged to
/// `test`; also reports the test AUC.
pub fn select_then_apply(val: &ScoredSet, test: &ScoredSet) -> Result<EvalMetrics, EvalError> {
    let threshold = best_f1(val)?.threshold;
    test.require_both_classes()?;
    Ok(EvalMetrics {
        auc: auc(test)?,
        at_threshold: Some(metrics_at(test, threshold)),
    })
}

/// Where the F1 threshold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Best F1 on the validation split, applied to test.
    #[default]
    Val,
    /// Best F1 on test itself (an optimistic upper bound).
    TestOracle,
    /// Report AUC only.
    AucOnly,
}

pub fn evaluate(mode: ThresholdMode, val: Option<&ScoredSet>, test: &ScoredSet) -> Result<EvalMetrics, EvalError> {
    match mode {
        ThresholdMode::Val => select_then_apply(val.ok_or(EvalError::MissingValidation("val"))?, test),
        ThresholdMode::TestOracle => Ok(EvalMetrics {
            auc: auc(test)?,
            at_threshold: Some(best_f1(test)?),
        }),
        ThresholdMode::AucOnly => Ok(EvalMetrics {
            auc: auc(test)?,
            at_threshold: None,
        }),
    }
}
