//! Entity-level precision/recall/F1 and token accuracy.
//!
//! Scores are fractions in [0, 1]; percentages only appear in rendered
//! output.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{extract_entities_in, EntitySpan, Tag};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{what}: {left} predicted vs {right} reference")]
    LengthMismatch {
        what: String,
        left: usize,
        right: usize,
    },
    #[error("no tokens selected for accuracy")]
    EmptySelection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl Prf1 {
    /// P = tp / predicted and R = tp / gold, each 0 when its denominator is 0.
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if gold == 0 { 0.0 } else { tp as f64 / gold as f64 };
        Self {
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    #[serde(rename = "p")]
    pub precision: f64,
    #[serde(rename = "r")]
    pub recall: f64,
    pub f1: f64,
    /// Number of gold spans of this class.
    pub support: usize,
}

/// Micro-averaged entity scores plus a per-class breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: BTreeMap<String, ClassScore>,
}

impl EntityReport {
    pub fn prf1(&self) -> Prf1 {
        Prf1 {
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
    }
}

/// Scores predicted against gold tag sequences, sentence by sentence. A
/// predicted span counts only on an exact (type, start, end) match.
pub fn entity_prf1(predicted: &[Vec<Tag>], gold: &[Vec<Tag>]) -> Result<EntityReport, MetricsError> {
    if predicted.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            what: "sentence count".into(),
            left: predicted.len(),
            right: gold.len(),
        });
    }
    let mut pred_spans: Vec<EntitySpan> = Vec::new();
    let mut gold_spans: Vec<EntitySpan> = Vec::new();
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(MetricsError::LengthMismatch {
                what: format!("sentence {i}"),
                left: p.len(),
                right: g.len(),
            });
        }
        pred_spans.extend(extract_entities_in(i, p));
        gold_spans.extend(extract_entities_in(i, g));
    }
    let gold_set: HashSet<&EntitySpan> = gold_spans.iter().collect();

    #[derive(Default)]
    struct Counts {
        tp: usize,
        predicted: usize,
        gold: usize,
    }
    let mut per: BTreeMap<String, Counts> = BTreeMap::new();
    for s in &gold_spans {
        per.entry(s.entity_type.clone()).or_default().gold += 1;
    }
    let mut tp = 0;
    for s in &pred_spans {
        let c = per.entry(s.entity_type.clone()).or_default();
        c.predicted += 1;
        if gold_set.contains(s) {
            c.tp += 1;
            tp += 1;
        }
    }
    let overall = Prf1::from_counts(tp, pred_spans.len(), gold_spans.len());
    let per_class = per
        .into_iter()
        .map(|(k, c)| {
            let s = Prf1::from_counts(c.tp, c.predicted, c.gold);
            (
                k,
                ClassScore {
                    precision: s.precision,
                    recall: s.recall,
                    f1: s.f1,
                    support: c.gold,
                },
            )
        })
        .collect();
    Ok(EntityReport {
        precision: overall.precision,
        recall: overall.recall,
        f1: overall.f1,
        per_class,
    })
}

/// Exact-match fraction over the selected positions (all by default).
pub fn token_accuracy<T: PartialEq>(
    predicted: &[T],
    reference: &[T],
    mask: Option<&[bool]>,
) -> Result<f64, MetricsError> {
    if predicted.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            what: "token count".into(),
            left: predicted.len(),
            right: reference.len(),
        });
    }
    if let Some(m) = mask {
        if m.len() != predicted.len() {
            return Err(MetricsError::LengthMismatch {
                what: "mask length".into(),
                left: m.len(),
                right: predicted.len(),
            });
        }
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (i, (p, r)) in predicted.iter().zip(reference).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            total += 1;
            hits += usize::from(p == r);
        }
    }
    if total == 0 {
        return Err(MetricsError::EmptySelection);
    }
    Ok(hits as f64 / total as f64)
}
