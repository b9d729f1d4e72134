//! Detection scoring: IoU matching, average precision, precision-recall
//! curves, accuracy and per-iteration learning curves.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::ClassifierModel;
use crate::features::FeatureVector;
use crate::scalar::Scalar;

/// Minimum IoU (exclusive) for a prediction to count as a true positive.
pub const OVERLAP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no ground-truth positives")]
    NoPositives,
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("scorer failed: {0}")]
    Scorer(String),
}

/// Axis-aligned 3D box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3<T> {
    pub min: [T; 3],
    pub max: [T; 3],
}

impl<T: Scalar> Box3<T> {
    pub fn new(min: [T; 3], max: [T; 3]) -> Self {
        Self { min, max }
    }

    /// Box of extents `dims` with its footprint centred on `(x, y)` and its base at `z0`.
    pub fn centered(x: T, y: T, z0: T, dims: [T; 3]) -> Self {
        let h = T::lit(0.5);
        Self {
            min: [x - dims[0] * h, y - dims[1] * h, z0],
            max: [x + dims[0] * h, y + dims[1] * h, z0 + dims[2]],
        }
    }

    pub fn volume(&self) -> T {
        (0..3)
            .map(|k| (self.max[k] - self.min[k]).max(T::zero()))
            .fold(T::one(), |a, b| a * b)
    }

    pub fn iou(&self, other: &Self) -> T {
        let mut inter = T::one();
        for k in 0..3 {
            let lo = self.min[k].max(other.min[k]);
            let hi = self.max[k].min(other.max[k]);
            if hi <= lo {
                return T::zero();
            }
            inter = inter * (hi - lo);
        }
        let union = self.volume() + other.volume() - inter;
        if union > T::zero() {
            inter / union
        } else {
            T::zero()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox<T> {
    pub bbox: Box3<T>,
    pub score: T,
}

/// Outcome of matching one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(score, is_true_positive)` for every prediction, in input order.
    pub predictions: Vec<(f64, bool)>,
    /// Matched ground-truth index for every prediction, in input order.
    pub assignment: Vec<Option<usize>>,
    pub ground_truth: usize,
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.predictions.iter().filter(|p| p.1).count()
    }

    pub fn false_positives(&self) -> usize {
        self.predictions.iter().filter(|p| !p.1).count()
    }
}

fn lexicographic<T: Scalar>(a: &Box3<T>, b: &Box3<T>) -> Ordering {
    a.min
        .iter()
        .chain(&a.max)
        .zip(b.min.iter().chain(&b.max))
        .map(|(x, y)| x.to_f64_lossy().total_cmp(&y.to_f64_lossy()))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

/// Greedy matching in descending score order. Ties in score are broken by
/// box position so the result does not depend on input order.
pub fn match_frame<T: Scalar>(
    predictions: &[ScoredBox<T>],
    ground_truth: &[Box3<T>],
) -> MatchResult {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&predictions[i], &predictions[j]);
        b.score
            .to_f64_lossy()
            .total_cmp(&a.score.to_f64_lossy())
            .then_with(|| lexicographic(&a.bbox, &b.bbox))
            .then(i.cmp(&j))
    });
    let mut taken = vec![false; ground_truth.len()];
    let mut assignment = vec![None; predictions.len()];
    let threshold = T::lit(OVERLAP_THRESHOLD);
    for &i in &order {
        let mut best: Option<(usize, T)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = predictions[i].bbox.iou(gt);
            if iou > threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            assignment[i] = Some(g);
        }
    }
    let matched = taken.iter().filter(|&&t| t).count();
    MatchResult {
        predictions: predictions
            .iter()
            .zip(&assignment)
            .map(|(p, a)| (p.score.to_f64_lossy(), a.is_some()))
            .collect(),
        assignment,
        ground_truth: ground_truth.len(),
        false_negatives: ground_truth.len() - matched,
    }
}

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Predictions with score at or above this value are counted.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

fn pooled(results: &[MatchResult]) -> (Vec<(f64, bool)>, usize) {
    let mut all: Vec<(f64, bool)> = results
        .iter()
        .flat_map(|r| r.predictions.iter().copied())
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    (all, results.iter().map(|r| r.ground_truth).sum())
}

/// Precision and recall after each distinct score, highest first.
///
/// Predictions sharing a score enter the ranking together.
pub fn precision_recall_curve(results: &[MatchResult]) -> Vec<PrPoint> {
    let (all, n_gt) = pooled(results);
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut k = 0;
    while k < all.len() {
        let s = all[k].0;
        while k < all.len() && all[k].0 == s {
            tp += all[k].1 as usize;
            seen += 1;
            k += 1;
        }
        out.push(PrPoint {
            threshold: s,
            precision: tp as f64 / seen as f64,
            recall: if n_gt > 0 {
                tp as f64 / n_gt as f64
            } else {
                0.0
            },
        });
    }
    out
}

/// All-point average precision over a test set.
pub fn average_precision(results: &[MatchResult]) -> Result<f64, EvalError> {
    let n_gt: usize = results.iter().map(|r| r.ground_truth).sum();
    if n_gt == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for p in precision_recall_curve(results) {
        ap += p.precision * (p.recall - prev_recall);
        prev_recall = p.recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Result<f64, EvalError> {
        match self.total() {
            0 => Err(EvalError::EmptySet),
            n => Ok((self.tp + self.tn) as f64 / n as f64),
        }
    }
}

/// Classification outcome at `threshold`: a prediction is called human
/// when its score exceeds the threshold, and is truly human when matched.
/// Ground truth without any matching prediction counts as a false negative.
pub fn confusion(results: &[MatchResult], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for r in results {
        for &(score, human) in &r.predictions {
            match (score > threshold, human) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c.fn_ += r.false_negatives;
    }
    c
}

pub fn accuracy(results: &[MatchResult], threshold: f64) -> Result<f64, EvalError> {
    confusion(results, threshold).accuracy()
}

/// Anything that scores a cluster descriptor.
pub trait Scorer<T> {
    fn score(&self, features: &FeatureVector<T>) -> Result<T, EvalError>;
}

impl<T, S: Scorer<T> + ?Sized> Scorer<T> for &S {
    fn score(&self, features: &FeatureVector<T>) -> Result<T, EvalError> {
        (**self).score(features)
    }
}

impl<T: Scalar> Scorer<T> for ClassifierModel<T> {
    fn score(&self, features: &FeatureVector<T>) -> Result<T, EvalError> {
        self.predict_proba(features)
            .map_err(|e| EvalError::Scorer(e.to_string()))
    }
}

/// Untrained placeholder that gives every cluster the same score.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer<T>(pub T);

impl<T: Scalar> Scorer<T> for ConstantScorer<T> {
    fn score(&self, _: &FeatureVector<T>) -> Result<T, EvalError> {
        Ok(self.0)
    }
}

/// One annotated test frame: candidate clusters and ground-truth human boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFrame<T> {
    pub candidates: Vec<(FeatureVector<T>, Box3<T>)>,
    pub humans: Vec<Box3<T>>,
}

pub fn evaluate_frames<T: Scalar, S: Scorer<T> + ?Sized>(
    scorer: &S,
    frames: &[TestFrame<T>],
) -> Result<Vec<MatchResult>, EvalError> {
    frames
        .iter()
        .map(|f| {
            let preds = f
                .candidates
                .iter()
                .map(|(v, b)| {
                    Ok(ScoredBox {
                        bbox: *b,
                        score: scorer.score(v)?,
                    })
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            Ok(match_frame(&preds, &f.humans))
        })
        .collect()
}

/// Metrics of one scorer on a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub ap: f64,
    pub accuracy: f64,
    pub curve: Vec<PrPoint>,
}

pub fn evaluate<T: Scalar, S: Scorer<T> + ?Sized>(
    scorer: &S,
    frames: &[TestFrame<T>],
    threshold: f64,
) -> Result<Metrics, EvalError> {
    let results = evaluate_frames(scorer, frames)?;
    Ok(Metrics {
        ap: average_precision(&results)?,
        accuracy: accuracy(&results, threshold)?,
        curve: precision_recall_curve(&results),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: u64,
    pub ap: f64,
    pub accuracy: f64,
}

/// AP and accuracy of each iteration's frozen model on a fixed test set.
pub fn learning_curve<T: Scalar, S: Scorer<T>>(
    models: &[(u64, S)],
    frames: &[TestFrame<T>],
) -> Result<Vec<CurveRow>, EvalError> {
    models
        .iter()
        .map(|(iteration, m)| {
            let results = evaluate_frames(m, frames)?;
            Ok(CurveRow {
                iteration: *iteration,
                ap: average_precision(&results)?,
                accuracy: accuracy(&results, 0.5)?,
            })
        })
        .collect()
}
