//! Training-dynamics analytics: the per-epoch correctness ledger,
//! learning/forgetting events, and the loss-threshold noise detector.
//!
//! An example is one token, identified by its position in corpus order.
//! Before the first epoch every example counts as incorrect, so being
//! correct at epoch 1 is a learning event.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{f1_score, Prf1};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("epoch record has {found} examples, ledger has {expected}")]
    Shape { expected: usize, found: usize },
    #[error("epoch {found} does not follow epoch {last}")]
    EpochOrder { last: usize, found: usize },
    #[error("non-finite loss at example {0}")]
    NonFiniteLoss(usize),
    #[error("masks differ in length: {left} vs {right}")]
    MaskLength { left: usize, right: usize },
    #[error("noise mask selects no tokens")]
    EmptyMask,
    #[error("ledger csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("ledger csv: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Prediction equals the observed (training) tag.
    pub correct_observed: Vec<bool>,
    /// Prediction equals the gold tag.
    pub correct_gold: Vec<bool>,
    pub loss: Vec<f64>,
}

/// Per-example correctness and loss for each recorded epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLedger {
    num_examples: usize,
    records: Vec<EpochRecord>,
}

impl EventLedger {
    pub fn new(num_examples: usize) -> Self {
        Self {
            num_examples,
            records: Vec::new(),
        }
    }

    /// Ledger whose observed and gold channels both equal `matrix`
    /// (epochs × examples), with zero losses. Epochs are numbered from 1.
    pub fn from_correctness(num_examples: usize, matrix: &[Vec<bool>]) -> Result<Self, DynamicsError> {
        let mut ledger = Self::new(num_examples);
        for (i, row) in matrix.iter().enumerate() {
            ledger.push(EpochRecord {
                epoch: i + 1,
                correct_observed: row.clone(),
                correct_gold: row.clone(),
                loss: vec![0.0; row.len()],
            })?;
        }
        Ok(ledger)
    }

    pub fn push(&mut self, record: EpochRecord) -> Result<(), DynamicsError> {
        for len in [record.correct_observed.len(), record.correct_gold.len(), record.loss.len()] {
            if len != self.num_examples {
                return Err(DynamicsError::Shape {
                    expected: self.num_examples,
                    found: len,
                });
            }
        }
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(DynamicsError::EpochOrder {
                    last: last.epoch,
                    found: record.epoch,
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn num_examples(&self) -> usize {
        self.num_examples
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses_at(&self, epoch: usize) -> Option<&[f64]> {
        self.records
            .iter()
            .find(|r| r.epoch == epoch)
            .map(|r| r.loss.as_slice())
    }

    /// CSV with columns `example_id,epoch,correct_observed,correct_gold,loss`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DynamicsError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["example_id", "epoch", "correct_observed", "correct_gold", "loss"])?;
        for r in &self.records {
            for i in 0..self.num_examples {
                out.write_record([
                    i.to_string(),
                    r.epoch.to_string(),
                    u8::from(r.correct_observed[i]).to_string(),
                    u8::from(r.correct_gold[i]).to_string(),
                    r.loss[i].to_string(),
                ])?;
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, DynamicsError> {
        #[derive(Deserialize)]
        struct Row {
            example_id: usize,
            epoch: usize,
            correct_observed: u8,
            correct_gold: u8,
            loss: f64,
        }
        let mut reader = csv::Reader::from_reader(r);
        let mut records: Vec<EpochRecord> = Vec::new();
        for row in reader.deserialize() {
            let row: Row = row?;
            if records.last().is_none_or(|r| r.epoch != row.epoch) {
                records.push(EpochRecord {
                    epoch: row.epoch,
                    correct_observed: Vec::new(),
                    correct_gold: Vec::new(),
                    loss: Vec::new(),
                });
            }
            let rec = records.last_mut().expect("just pushed");
            if row.example_id != rec.loss.len() {
                return Err(DynamicsError::Format(format!(
                    "epoch {}: expected example {}, found {}",
                    row.epoch,
                    rec.loss.len(),
                    row.example_id
                )));
            }
            rec.correct_observed.push(row.correct_observed != 0);
            rec.correct_gold.push(row.correct_gold != 0);
            rec.loss.push(row.loss);
        }
        let n = records.first().map_or(0, |r| r.loss.len());
        let mut ledger = Self::new(n);
        for rec in records {
            ledger.push(rec)?;
        }
        Ok(ledger)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleEvents {
    pub learning_events: usize,
    pub forgetting_events: usize,
    pub first_learning_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub per_example: Vec<ExampleEvents>,
    /// Examples with at least one forgetting event.
    pub forgettable: usize,
    /// Examples with no forgetting event.
    pub unforgettable: usize,
    /// Examples with at least one learning event.
    pub learned: usize,
    pub total: usize,
}

impl EventSummary {
    /// N_f / N_l as a fraction; `None` when nothing was learned.
    pub fn forgetting_ratio(&self) -> Option<f64> {
        (self.learned > 0).then(|| forgetting_ratio(self.forgettable as f64, self.learned as f64))
    }
}

/// N_f / N_l. Works on counts or on percentages of the same base.
pub fn forgetting_ratio(forgettable: f64, learned: f64) -> f64 {
    forgettable / learned
}

/// Learning and forgetting events over the observed-tag correctness channel.
pub fn compute_events(ledger: &EventLedger) -> EventSummary {
    let mut per_example = vec![ExampleEvents::default(); ledger.num_examples];
    let mut previous = vec![false; ledger.num_examples];
    for rec in &ledger.records {
        for (i, ev) in per_example.iter_mut().enumerate() {
            let now = rec.correct_observed[i];
            match (previous[i], now) {
                (false, true) => {
                    ev.learning_events += 1;
                    ev.first_learning_epoch.get_or_insert(rec.epoch);
                }
                (true, false) => ev.forgetting_events += 1,
                _ => {}
            }
            previous[i] = now;
        }
    }
    let forgettable = per_example.iter().filter(|e| e.forgetting_events > 0).count();
    let learned = per_example.iter().filter(|e| e.learning_events > 0).count();
    EventSummary {
        total: per_example.len(),
        unforgettable: per_example.len() - forgettable,
        forgettable,
        learned,
        per_example,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstLearningHistogram {
    /// `counts[e - 1]` is the number of examples first learned at epoch e.
    pub counts: Vec<usize>,
    pub never_learned: usize,
}

pub fn histogram_first_learning(summary: &EventSummary, epoch_count: usize) -> FirstLearningHistogram {
    let max_seen = summary
        .per_example
        .iter()
        .filter_map(|e| e.first_learning_epoch)
        .max()
        .unwrap_or(0);
    let mut counts = vec![0; epoch_count.max(max_seen)];
    let mut never_learned = 0;
    for e in &summary.per_example {
        match e.first_learning_epoch {
            Some(epoch) => counts[epoch - 1] += 1,
            None => never_learned += 1,
        }
    }
    FirstLearningHistogram { counts, never_learned }
}

/// Outcome of the two-cluster loss threshold search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: Option<f64>,
    /// Mean of losses below the threshold.
    pub mean_clean: Option<f64>,
    /// Mean of losses at or above the threshold.
    pub mean_noisy: Option<f64>,
    pub objective: f64,
    pub predicted_noisy: Vec<bool>,
    /// Set when fewer than two distinct losses exist.
    pub degenerate: bool,
}

/// Σ_{x<T}(x-μ_c)² + Σ_{x≥T}(x-μ_n)², evaluated in two passes.
pub fn threshold_objective(losses: &[f64], threshold: f64) -> f64 {
    let sse = |keep: &dyn Fn(f64) -> bool| {
        let part: Vec<f64> = losses.iter().copied().filter(|&x| keep(x)).collect();
        if part.is_empty() {
            return 0.0;
        }
        let mean = part.iter().sum::<f64>() / part.len() as f64;
        part.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
    };
    sse(&|x| x < threshold) + sse(&|x| x >= threshold)
}

fn mean_where(losses: &[f64], keep: impl Fn(f64) -> bool) -> Option<f64> {
    let (s, n) = losses
        .iter()
        .filter(|&&x| keep(x))
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Finds the threshold T minimizing the within-cluster squared error of the
/// split {x < T} / {x ≥ T}, and flags every loss ≥ T as noisy.
///
/// Candidates are the midpoints between consecutive distinct sorted losses,
/// which covers every distinct split. Ties go to the smaller T.
pub fn detect_noise(losses: &[f64]) -> Result<ThresholdResult, DynamicsError> {
    if let Some(i) = losses.iter().position(|x| !x.is_finite()) {
        return Err(DynamicsError::NonFiniteLoss(i));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n < 2 || sorted[0] == sorted[n - 1] {
        return Ok(ThresholdResult {
            threshold: None,
            mean_clean: None,
            mean_noisy: None,
            objective: threshold_objective(losses, f64::INFINITY),
            predicted_noisy: vec![false; n],
            degenerate: true,
        });
    }

    // Centered prefix sums keep the SSE = Σx² - (Σx)²/n form well conditioned.
    let center = sorted.iter().sum::<f64>() / n as f64;
    let mut sum = vec![0.0; n + 1];
    let mut sq = vec![0.0; n + 1];
    for (i, x) in sorted.iter().enumerate() {
        let d = x - center;
        sum[i + 1] = sum[i] + d;
        sq[i + 1] = sq[i] + d * d;
    }
    let sse = |a: usize, b: usize| {
        let k = (b - a) as f64;
        let s = sum[b] - sum[a];
        (sq[b] - sq[a] - s * s / k).max(0.0)
    };

    let mut best: Option<(f64, usize)> = None;
    for i in 1..n {
        if sorted[i - 1] == sorted[i] {
            continue;
        }
        let obj = sse(0, i) + sse(i, n);
        if best.is_none_or(|(b, _)| obj < b) {
            best = Some((obj, i));
        }
    }
    let (_, split) = best.expect("at least two distinct values");
    let (lo, hi) = (sorted[split - 1], sorted[split]);
    let mut threshold = lo + (hi - lo) / 2.0;
    if threshold <= lo {
        threshold = hi;
    }

    Ok(ThresholdResult {
        threshold: Some(threshold),
        mean_clean: mean_where(losses, |x| x < threshold),
        mean_noisy: mean_where(losses, |x| x >= threshold),
        objective: threshold_objective(losses, threshold),
        predicted_noisy: losses.iter().map(|&x| x >= threshold).collect(),
        degenerate: false,
    })
}

/// Binary precision/recall/F1 for the noisy class. Two all-clean masks
/// score 1 across the board.
pub fn detection_metrics(predicted: &[bool], truth: &[bool]) -> Result<Prf1, DynamicsError> {
    if predicted.len() != truth.len() {
        return Err(DynamicsError::MaskLength {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    let tp = predicted.iter().zip(truth).filter(|(p, t)| **p && **t).count();
    let pred = predicted.iter().filter(|p| **p).count();
    let gold = truth.iter().filter(|t| **t).count();
    if pred == 0 && gold == 0 {
        return Ok(Prf1 {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        });
    }
    Ok(Prf1::from_counts(tp, pred, gold))
}

/// F1 implied by reported precision and recall.
pub fn f1_from_reported(precision: f64, recall: f64) -> f64 {
    f1_score(precision, recall)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyAccuracy {
    /// Agreement with the corrupted labels: how much noise was memorised.
    pub observed: f64,
    /// Agreement with the clean labels on the same tokens.
    pub gold: f64,
    pub count: usize,
}

/// Accuracy on the corrupted tokens against observed and gold labels.
pub fn noisy_token_accuracy<T: PartialEq>(
    predicted: &[T],
    observed: &[T],
    gold: &[T],
    mask: &[bool],
) -> Result<NoisyAccuracy, DynamicsError> {
    for len in [observed.len(), gold.len(), mask.len()] {
        if len != predicted.len() {
            return Err(DynamicsError::MaskLength {
                left: predicted.len(),
                right: len,
            });
        }
    }
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(DynamicsError::EmptyMask);
    }
    let frac = |reference: &[T]| {
        idx.iter().filter(|&&i| predicted[i] == reference[i]).count() as f64 / idx.len() as f64
    };
    Ok(NoisyAccuracy {
        observed: frac(observed),
        gold: frac(gold),
        count: idx.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub total: usize,
    pub forgettable: usize,
    pub unforgettable: usize,
    pub learned: usize,
    pub forgettable_over_learned: Option<f64>,
}

impl From<&EventSummary> for Aggregates {
    fn from(s: &EventSummary) -> Self {
        Self {
            total: s.total,
            forgettable: s.forgettable,
            unforgettable: s.unforgettable,
            learned: s.learned,
            forgettable_over_learned: s.forgetting_ratio(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub epoch: usize,
    pub threshold: Option<f64>,
    pub mean_clean: Option<f64>,
    pub mean_noisy: Option<f64>,
    pub objective: f64,
    pub degenerate: bool,
    pub flagged: usize,
    /// Present when a ground-truth noise mask was supplied.
    pub detection: Option<Prf1>,
}

/// JSON document emitted by `protoseq analyze`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub aggregates: Option<Aggregates>,
    pub histogram: Option<Vec<usize>>,
    pub never_learned: Option<usize>,
    pub detector: Option<DetectorReport>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn events(row: &[u8]) -> ExampleEvents {
        let m: Vec<Vec<bool>> = row.iter().map(|&c| vec![c == 1]).collect();
        let ledger = EventLedger::from_correctness(1, &m).unwrap();
        compute_events(&ledger).per_example[0].clone()
    }

    #[test]
    fn monotone_history() {
        let e = events(&[0, 1, 1]);
        assert_eq!(e.learning_events, 1);
        assert_eq!(e.forgetting_events, 0);
        assert_eq!(e.first_learning_epoch, Some(2));
    }

    #[test]
    fn forgotten_then_relearned() {
        let e = events(&[1, 0, 1]);
        assert_eq!(e.learning_events, 2);
        assert_eq!(e.forgetting_events, 1);
        assert_eq!(e.first_learning_epoch, Some(1));
        let m = vec![vec![true, false], vec![false, false], vec![true, true]];
        let s = compute_events(&EventLedger::from_correctness(2, &m).unwrap());
        assert_eq!((s.forgettable, s.unforgettable, s.learned, s.total), (1, 1, 2, 2));
    }

    #[test]
    fn published_forgetting_ratios() {
        let r = forgetting_ratio(2669.0, 230716.0) * 100.0;
        assert!((r - 1.1568).abs() < 1e-4, "{r}");
    }

    #[test]
    fn ledger_rejects_bad_records() {
        let mut l = EventLedger::new(2);
        let rec = |epoch, n| EpochRecord {
            epoch,
            correct_observed: vec![true; n],
            correct_gold: vec![true; n],
            loss: vec![0.0; n],
        };
        assert!(matches!(l.push(rec(1, 3)), Err(DynamicsError::Shape { .. })));
        l.push(rec(2, 2)).unwrap();
        assert!(matches!(l.push(rec(2, 2)), Err(DynamicsError::EpochOrder { .. })));
    }

    #[test]
    fn ledger_csv_round_trip() {
        let mut l = EventLedger::new(3);
        for epoch in 1..=2 {
            l.push(EpochRecord {
                epoch,
                correct_observed: vec![true, false, epoch == 2],
                correct_gold: vec![false, false, true],
                loss: vec![0.125, 3.5e-9, 1.0 / 3.0],
            })
            .unwrap();
        }
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("example_id,epoch,correct_observed,correct_gold,loss\n0,1,1,0,0.125\n"));
        assert_eq!(EventLedger::read_csv(&buf[..]).unwrap(), l);
    }

    #[test]
    fn histogram_degenerate_and_conservation() {
        let m = vec![vec![true; 5], vec![true; 5], vec![true; 5]];
        let s = compute_events(&EventLedger::from_correctness(5, &m).unwrap());
        let h = histogram_first_learning(&s, 3);
        assert_eq!(h.counts, vec![5, 0, 0]);
        assert_eq!(h.never_learned, 0);

        let m = vec![vec![false, true, false], vec![false, false, true]];
        let s = compute_events(&EventLedger::from_correctness(3, &m).unwrap());
        let h = histogram_first_learning(&s, 2);
        assert_eq!(h.counts, vec![1, 1]);
        assert_eq!(h.never_learned, 1);
        assert_eq!(h.counts.iter().sum::<usize>() + h.never_learned, s.total);
    }

    #[test]
    fn separated_clusters_split_at_midpoint() {
        let r = detect_noise(&[0.0, 0.0, 10.0, 10.0]).unwrap();
        assert_eq!(r.threshold, Some(5.0));
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.predicted_noisy, vec![false, false, true, true]);
        assert_eq!((r.mean_clean, r.mean_noisy), (Some(0.0), Some(10.0)));
    }

    #[test]
    fn constant_losses_are_degenerate() {
        let r = detect_noise(&[2.0; 6]).unwrap();
        assert!(r.degenerate);
        assert!(r.predicted_noisy.iter().all(|p| !p));
        assert!(detect_noise(&[1.0]).unwrap().degenerate);
        assert!(matches!(detect_noise(&[1.0, f64::NAN]), Err(DynamicsError::NonFiniteLoss(1))));
    }

    #[test]
    fn adjacent_floats_keep_partition() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let r = detect_noise(&[a, b]).unwrap();
        assert_eq!(r.predicted_noisy, vec![false, true]);
    }

    /// Exhaustive O(n²) search over every split of the sorted losses.
    fn oracle_min(losses: &[f64]) -> f64 {
        let mut s = losses.to_vec();
        s.sort_by(f64::total_cmp);
        let sse = |p: &[f64]| {
            if p.is_empty() {
                return 0.0;
            }
            let m = p.iter().sum::<f64>() / p.len() as f64;
            p.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        (1..s.len())
            .filter(|&i| s[i - 1] < s[i])
            .map(|i| sse(&s[..i]) + sse(&s[i..]))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn threshold_attains_exhaustive_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let n = rng.random_range(2..120);
            let losses: Vec<f64> = (0..n)
                .map(|_| if rng.random_bool(0.2) { rng.random_range(2.0..6.0) } else { rng.random_range(0.0..1.5) })
                .collect();
            let r = detect_noise(&losses).unwrap();
            let best = oracle_min(&losses);
            assert!((r.objective - best).abs() <= 1e-9 * best.max(1.0), "{} vs {best}", r.objective);
        }
    }

    #[test]
    fn objective_piecewise_constant_on_dense_grid() {
        let losses = [0.1, 0.4, 0.45, 2.0, 2.2, 3.1];
        let r = detect_noise(&losses).unwrap();
        let dense_min = (0..=4000)
            .map(|i| threshold_objective(&losses, i as f64 * 0.001))
            .filter(|o| o.is_finite())
            .fold(f64::INFINITY, f64::min);
        assert!((dense_min - r.objective).abs() < 1e-12);
    }

    #[test]
    fn detection_metric_cases() {
        let truth = [true, false, true, false];
        assert_eq!(detection_metrics(&truth, &truth).unwrap().f1, 1.0);
        assert_eq!(detection_metrics(&[false; 3], &[false; 3]).unwrap().f1, 1.0);
        let m = detection_metrics(&[true, true, false, false], &truth).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        assert!(detection_metrics(&[true], &truth).is_err());
        assert!((f1_from_reported(0.9218, 0.9590) - 0.9400).abs() < 1e-4);
        assert!((f1_from_reported(0.9619, 0.9633) - 0.9626).abs() < 1e-4);
        // The harmonic mean of 98.64% and 97.27% is 97.9502%.
        assert!((f1_from_reported(0.9864, 0.9727) - 0.979502).abs() < 1e-6);
    }

    #[test]
    fn noisy_accuracy_limits() {
        let gold = [0, 1, 2, 0];
        let observed = [0, 2, 2, 1];
        let mask = [false, true, false, true];
        let a = noisy_token_accuracy(&gold, &observed, &gold, &mask).unwrap();
        assert_eq!((a.observed, a.gold, a.count), (0.0, 1.0, 2));
        let a = noisy_token_accuracy(&observed, &observed, &gold, &mask).unwrap();
        assert_eq!(a.observed, 1.0);
        assert!(matches!(
            noisy_token_accuracy(&gold, &observed, &gold, &[false; 4]),
            Err(DynamicsError::EmptyMask)
        ));
    }

    #[test]
    fn event_invariants_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let epochs = rng.random_range(0..12);
            let n = rng.random_range(0..40);
            let m: Vec<Vec<bool>> = (0..epochs).map(|_| (0..n).map(|_| rng.random_bool(0.6)).collect()).collect();
            let s = compute_events(&EventLedger::from_correctness(n, &m).unwrap());
            assert_eq!(s.forgettable + s.unforgettable, s.total);
            assert!(s.forgettable <= s.learned);
            for e in &s.per_example {
                assert!(e.learning_events >= e.forgetting_events);
                assert!(e.learning_events - e.forgetting_events <= 1);
            }
        }
    }
}
