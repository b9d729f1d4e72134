//! Label generation from fused trajectory evidence.
//!
//! Every observation on a trajectory contributes its odds `p / (1 - p)`;
//! the product over the whole trajectory is turned back into the
//! probability that the trajectory belongs to a human. Trajectories at or
//! above `sigma_t` turn their human-sized 3D clusters into positives, while
//! clusters with non-human volumes become negatives. Samples are released
//! to the classifier in fixed-size balanced batches.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::ClassifierModel;
use crate::features::FeatureVector;
use crate::model::{BinaryLabel, Dims, LabeledSample, Timestamp, TrackId};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("probability {0} outside the open interval (0, 1)")]
    DomainError(String),
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error(transparent)]
    Classifier(#[from] crate::classifier::ClassifierError),
}

/// Axis bounds of the human-like volume, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeBounds<T> {
    pub w: (T, T),
    pub d: (T, T),
    pub h: (T, T),
}

impl<T: Scalar> Default for VolumeBounds<T> {
    fn default() -> Self {
        Self {
            w: (T::lit(0.2), T::lit(1.0)),
            d: (T::lit(0.2), T::lit(1.0)),
            h: (T::lit(0.2), T::lit(2.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelGenConfig<T> {
    pub sigma_t: T,
    pub pos_batch: usize,
    pub neg_batch: usize,
    pub max_iterations: u64,
    pub volume_bounds: VolumeBounds<T>,
    /// Seconds between re-evaluations of still-active tracks.
    pub active_check_interval: f64,
    /// A positive sample needs human evidence from a detector other than
    /// the classifier being trained within this many seconds of it, so a
    /// track that drifts onto another object stops labeling. `None` labels
    /// every sample of a confident trajectory.
    pub support_window: Option<f64>,
    /// Skip positive samples whose volume fails the human bounds, such as a
    /// person merged into a neighbouring object's cluster.
    pub volume_gated_positives: bool,
}

impl<T: Scalar> Default for LabelGenConfig<T> {
    fn default() -> Self {
        Self {
            sigma_t: T::lit(0.7),
            pos_batch: 300,
            neg_batch: 300,
            max_iterations: 7,
            volume_bounds: VolumeBounds::default(),
            active_check_interval: 5.0,
            support_window: Some(0.5),
            volume_gated_positives: true,
        }
    }
}

impl<T: Scalar> LabelGenConfig<T> {
    pub fn is_valid(&self) -> bool {
        self.sigma_t > T::lit(0.5)
            && self.sigma_t < T::one()
            && self.pos_batch >= 1
            && self.neg_batch >= 1
    }
}

/// `p / (1 - p)`.
pub fn observation_odds<T: Scalar>(p: T) -> Result<T, FusionError> {
    if !(p > T::zero() && p < T::one()) {
        return Err(FusionError::DomainError(format!("{p}")));
    }
    Ok(p / (T::one() - p))
}

/// Log-odds `ln p - ln(1 - p)` of one observation.
#[inline]
pub fn log_odds<T: Scalar>(p: T) -> T {
    p.ln() - (-p).ln_1p()
}

/// Fused probability of a trajectory from the confidences of all its
/// observations.
///
/// The odds product is accumulated as a sum of log-odds. An empty
/// trajectory has odds 1 and probability 0.5.
pub fn trajectory_probability<T: Scalar, I: IntoIterator<Item = T>>(confidences: I) -> T {
    probability_from_log_odds(confidences.into_iter().map(log_odds).sum())
}

/// Probability of a summed log-odds value, evaluated without overflow.
pub fn probability_from_log_odds<T: Scalar>(l: T) -> T {
    if l >= T::zero() {
        T::one() / (T::one() + (-l).exp())
    } else {
        let e = l.exp();
        e / (T::one() + e)
    }
}

/// Confidence emitted by the motion prior for a track moving at `speed` m/s.
pub fn trajectory_prior_confidence<T: Scalar>(speed: T) -> T {
    if speed >= T::lit(0.3) && speed <= T::lit(3.0) {
        T::lit(0.7)
    } else {
        T::lit(0.5)
    }
}

/// Identifier of one 3D cluster instance within a run.
pub type SampleId = u64;

/// A featurized 3D cluster seen on some track.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSample<T> {
    pub id: SampleId,
    pub features: FeatureVector<T>,
    pub bounds: Dims<T>,
    pub stamp: Timestamp,
}

/// True when any dimension falls outside its human-like range.
pub fn is_volume_negative<T: Scalar>(dims: &Dims<T>, bounds: &VolumeBounds<T>) -> bool {
    let outside = |v: T, (lo, hi): (T, T)| v < lo || v > hi;
    outside(dims.w, bounds.w) || outside(dims.d, bounds.d) || outside(dims.h, bounds.h)
}

/// A trajectory offered to the positive labeler.
#[derive(Debug, Clone, Copy)]
pub struct LabelCandidate<'a, T> {
    pub track: TrackId,
    /// Fused probability of the trajectory.
    pub probability: T,
    pub samples: &'a [ClusterSample<T>],
    /// Ascending stamps of independent human evidence on the trajectory.
    pub support: &'a [f64],
}

/// Whether some stamp in the ascending `support` lies within `window` of `t`.
pub fn is_supported(t: Timestamp, support: &[f64], window: Option<f64>) -> bool {
    let Some(w) = window else { return true };
    let k = support.partition_point(|&s| s < t.0 - w);
    support.get(k).is_some_and(|&s| s <= t.0 + w)
}

/// Whether a sample on a confident trajectory may become a positive.
pub fn is_positive_candidate<T: Scalar>(
    sample: &ClusterSample<T>,
    support: &[f64],
    config: &LabelGenConfig<T>,
) -> bool {
    (!config.volume_gated_positives || !is_volume_negative(&sample.bounds, &config.volume_bounds))
        && is_supported(sample.stamp, support, config.support_window)
}

/// Positive samples from every trajectory whose fused probability reaches
/// `sigma_t`, subject to [`is_positive_candidate`]. Samples already in
/// `labeled` are skipped and new ones are added to it.
pub fn generate_positive_labels<T: Scalar>(
    tracks: &[LabelCandidate<'_, T>],
    config: &LabelGenConfig<T>,
    labeled: &mut HashSet<SampleId>,
) -> Vec<LabeledSample<T>> {
    let mut out = Vec::new();
    for c in tracks.iter().filter(|c| c.probability >= config.sigma_t) {
        for s in c
            .samples
            .iter()
            .filter(|s| is_positive_candidate(s, c.support, config))
        {
            if labeled.insert(s.id) {
                out.push(LabeledSample {
                    features: s.features.clone(),
                    label: BinaryLabel::Human,
                    source_track: Some(c.track),
                    stamp: s.stamp,
                });
            }
        }
    }
    out
}

/// Negative samples from clusters with non-human volumes. The flag marks
/// clusters on a trajectory at or above `sigma_t`, which are exempt.
pub fn volume_filter_negatives<T: Scalar>(
    clusters: &[(&ClusterSample<T>, bool)],
    config: &LabelGenConfig<T>,
    labeled: &mut HashSet<SampleId>,
) -> Vec<LabeledSample<T>> {
    clusters
        .iter()
        .filter(|(s, confident)| !confident && is_volume_negative(&s.bounds, &config.volume_bounds))
        .filter(|(s, _)| labeled.insert(s.id))
        .map(|(s, _)| LabeledSample {
            features: s.features.clone(),
            label: BinaryLabel::NonHuman,
            source_track: None,
            stamp: s.stamp,
        })
        .collect()
}

/// Pops one batch of exactly `pos_batch + neg_batch` samples, positives
/// first, once both queues hold enough.
pub fn assemble_batch<T: Scalar>(
    pending_pos: &mut VecDeque<LabeledSample<T>>,
    pending_neg: &mut VecDeque<LabeledSample<T>>,
    config: &LabelGenConfig<T>,
) -> Option<Vec<LabeledSample<T>>> {
    if pending_pos.len() < config.pos_batch || pending_neg.len() < config.neg_batch {
        return None;
    }
    let mut batch: Vec<_> = pending_pos.drain(..config.pos_batch).collect();
    batch.extend(pending_neg.drain(..config.neg_batch));
    Some(batch)
}

/// Correct-classification counts per retraining iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StabilityRecord {
    pub correct: Vec<usize>,
}

impl StabilityRecord {
    pub fn from_counts(correct: Vec<usize>) -> Self {
        Self { correct }
    }

    pub fn push(&mut self, u: usize) {
        self.correct.push(u);
    }

    pub fn iterations(&self) -> usize {
        self.correct.len()
    }

    /// `|u_i - u_{i+1}|` for consecutive iterations.
    pub fn increments(&self) -> Vec<usize> {
        self.correct
            .windows(2)
            .map(|w| w[0].abs_diff(w[1]))
            .collect()
    }

    /// Cumulative absolute change of the counts.
    pub fn stability(&self) -> usize {
        self.increments().iter().sum()
    }

    /// `stability / I`, the convergence ratio; zero before any iteration.
    pub fn convergence_ratio(&self) -> f64 {
        if self.correct.is_empty() {
            0.0
        } else {
            self.stability() as f64 / self.correct.len() as f64
        }
    }

    /// Stability after each iteration.
    pub fn running(&self) -> Vec<usize> {
        let mut acc = 0;
        std::iter::once(0)
            .chain(self.increments().into_iter().map(|d| {
                acc += d;
                acc
            }))
            .take(self.correct.len())
            .collect()
    }
}

/// Counts validation samples classified correctly at threshold 0.5.
pub fn count_correct<T: Scalar>(
    model: &ClassifierModel<T>,
    validation: &[LabeledSample<T>],
) -> Result<usize, FusionError> {
    if validation.is_empty() {
        return Err(FusionError::EmptyValidationSet);
    }
    let half = T::lit(0.5);
    let mut u = 0;
    for s in validation {
        let p = model.predict_proba(&s.features)?;
        if (s.label.is_human() && p > half) || (!s.label.is_human() && p <= half) {
            u += 1;
        }
    }
    Ok(u)
}

/// Appends the validation count of `model` to `record`.
pub fn record_iteration<T: Scalar>(
    record: &mut StabilityRecord,
    model: &ClassifierModel<T>,
    validation: &[LabeledSample<T>],
) -> Result<usize, FusionError> {
    let u = count_correct(model, validation)?;
    record.push(u);
    Ok(u)
}

/// Halting rule: the iteration cap, or a stability plateau over the last
/// two iterations when a validation set is available.
pub fn halted(iteration: u64, increments: Option<&[usize]>, max_iterations: u64) -> bool {
    if iteration >= max_iterations {
        return true;
    }
    match increments {
        Some(inc) if inc.len() >= 2 => inc[inc.len() - 2..].iter().all(|&d| d == 0),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle(ps: &[f64]) -> f64 {
        let a: f64 = ps.iter().product();
        let b: f64 = ps.iter().map(|p| 1.0 - p).product();
        a / (a + b)
    }

    #[test]
    fn odds_values() {
        assert_eq!(observation_odds(0.5).unwrap(), 1.0);
        assert!((observation_odds(0.8f64).unwrap() - 4.0).abs() < 1e-12);
        assert!((observation_odds(0.9f64).unwrap() - 9.0).abs() < 1e-12);
        assert!(observation_odds(1.0).is_err());
        assert!(observation_odds(0.0).is_err());
    }

    #[test]
    fn worked_trajectory_probabilities() {
        assert_eq!(trajectory_probability::<f64, _>([]), 0.5);
        assert!((trajectory_probability([0.8f64, 0.9]) - 36.0 / 37.0).abs() < 1e-12);
        assert!((trajectory_probability([0.8f64, 0.2]) - 0.5).abs() < 1e-12);
        assert!((trajectory_probability([0.8f32, 0.9]) - 36.0 / 37.0).abs() < 1e-6);
    }

    #[test]
    fn prior_confidence_bands() {
        assert_eq!(trajectory_prior_confidence(0.0), 0.5);
        assert_eq!(trajectory_prior_confidence(0.3), 0.7);
        assert_eq!(trajectory_prior_confidence(1.4), 0.7);
        assert_eq!(trajectory_prior_confidence(3.5), 0.5);
    }

    fn sample(id: SampleId, dims: (f64, f64, f64)) -> ClusterSample<f64> {
        ClusterSample {
            id,
            features: FeatureVector::padded(&[id as f64]),
            bounds: Dims::new(dims.0, dims.1, dims.2),
            stamp: Timestamp(id as f64),
        }
    }

    /// Every sample stamp counts as supported.
    const ALWAYS: [f64; 4] = [0.0, 1.0, 2.0, 3.0];

    fn candidate<'a>(
        track: u64,
        probability: f64,
        samples: &'a [ClusterSample<f64>],
    ) -> LabelCandidate<'a, f64> {
        LabelCandidate {
            track: TrackId(track),
            probability,
            samples,
            support: &ALWAYS,
        }
    }

    #[test]
    fn positives_follow_threshold_and_dedup() {
        let cfg = LabelGenConfig::default();
        let s = [sample(1, (0.5, 0.4, 1.7)), sample(2, (0.5, 0.4, 1.7))];
        let mut seen = HashSet::new();
        let p = trajectory_probability([0.8, 0.9]);
        let out = generate_positive_labels(&[candidate(0, p, &s)], &cfg, &mut seen);
        assert_eq!(out.len(), 2);
        assert!(out
            .iter()
            .all(|l| l.label == BinaryLabel::Human && l.source_track == Some(TrackId(0))));
        let again = generate_positive_labels(&[candidate(0, p, &s)], &cfg, &mut seen);
        assert!(again.is_empty());

        let mut seen = HashSet::new();
        assert!(generate_positive_labels(&[candidate(1, 0.5, &s)], &cfg, &mut seen).is_empty());
        assert!(generate_positive_labels(&[candidate(1, 0.99, &[])], &cfg, &mut seen).is_empty());
    }

    #[test]
    fn merged_clusters_are_not_positives_unless_ungated() {
        let s = [sample(1, (0.5, 0.4, 1.7)), sample(2, (0.7, 0.6, 3.0))];
        let mut seen = HashSet::new();
        let out = generate_positive_labels(
            &[candidate(0, 0.99, &s)],
            &LabelGenConfig::default(),
            &mut seen,
        );
        assert_eq!(out.len(), 1);
        assert!(!seen.contains(&2));

        let open = LabelGenConfig {
            volume_gated_positives: false,
            ..LabelGenConfig::default()
        };
        assert_eq!(
            generate_positive_labels(&[candidate(0, 0.99, &s)], &open, &mut seen).len(),
            1
        );
        assert!(seen.contains(&2));
    }

    #[test]
    fn samples_far_from_independent_evidence_are_skipped() {
        let s: Vec<_> = (0..10).map(|k| sample(k, (0.5, 0.4, 1.7))).collect();
        let support = [1.0, 1.5];
        let c = LabelCandidate {
            track: TrackId(0),
            probability: 0.99,
            samples: &s,
            support: &support,
        };
        let cfg = LabelGenConfig {
            support_window: Some(1.0),
            ..LabelGenConfig::default()
        };
        let mut seen = HashSet::new();
        let out = generate_positive_labels(&[c], &cfg, &mut seen);
        // Stamps 0..=2 lie within one second of the evidence at 1.0 and 1.5.
        assert_eq!(
            out.iter().map(|l| l.stamp.0).collect::<Vec<_>>(),
            [0.0, 1.0, 2.0]
        );

        let open = LabelGenConfig {
            support_window: None,
            ..LabelGenConfig::default()
        };
        assert_eq!(
            generate_positive_labels(&[c], &open, &mut HashSet::new()).len(),
            10
        );
        assert!(!is_supported(Timestamp(0.0), &[], Some(1.0)));
        assert!(is_supported(Timestamp(0.0), &[], None));
    }

    #[test]
    fn volume_filter_examples() {
        let b = VolumeBounds::default();
        assert!(!is_volume_negative(&Dims::new(0.5, 0.4, 1.7), &b));
        assert!(is_volume_negative(&Dims::new(0.1, 0.1, 0.1), &b));
        assert!(is_volume_negative(&Dims::new(0.5, 0.4, 2.5), &b));
        // Boundaries are inclusive.
        assert!(!is_volume_negative(&Dims::new(0.2, 1.0, 2.0), &b));
    }

    #[test]
    fn confident_tracks_are_exempt_from_volume_negatives() {
        let cfg = LabelGenConfig::default();
        let big = sample(7, (1.5, 0.5, 1.0));
        let mut seen = HashSet::new();
        assert!(volume_filter_negatives(&[(&big, true)], &cfg, &mut seen).is_empty());
        let out = volume_filter_negatives(&[(&big, false)], &cfg, &mut seen);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].label, BinaryLabel::NonHuman);
    }

    fn queues(
        pos: usize,
        neg: usize,
    ) -> (VecDeque<LabeledSample<f64>>, VecDeque<LabeledSample<f64>>) {
        let mk = |i: usize, human| LabeledSample {
            features: FeatureVector::padded(&[i as f64]),
            label: BinaryLabel::from_bool(human),
            source_track: None,
            stamp: Timestamp(i as f64),
        };
        (
            (0..pos).map(|i| mk(i, true)).collect(),
            (0..neg).map(|i| mk(i, false)).collect(),
        )
    }

    #[test]
    fn batches_follow_the_quota() {
        let cfg = LabelGenConfig::default();
        let (mut p, mut n) = queues(300, 300);
        assert_eq!(assemble_batch(&mut p, &mut n, &cfg).unwrap().len(), 600);

        let (mut p, mut n) = queues(299, 1000);
        assert!(assemble_batch(&mut p, &mut n, &cfg).is_none());

        let (mut p, mut n) = queues(650, 700);
        let b = assemble_batch(&mut p, &mut n, &cfg).unwrap();
        assert_eq!(b.iter().filter(|s| s.label.is_human()).count(), 300);
        assert_eq!((p.len(), n.len()), (350, 400));
        // Arrival order is preserved.
        assert_eq!(b[0].stamp, Timestamp(0.0));
        assert_eq!(p[0].stamp, Timestamp(300.0));
        assert!(assemble_batch(&mut p, &mut n, &cfg).is_some());
        assert!(assemble_batch(&mut p, &mut n, &cfg).is_none());
    }

    #[test]
    fn stability_examples() {
        assert_eq!(
            StabilityRecord::from_counts(vec![10, 10, 10]).stability(),
            0
        );
        assert_eq!(
            StabilityRecord::from_counts(vec![10, 12, 12]).stability(),
            2
        );
        let r = StabilityRecord::from_counts(vec![10, 12, 12, 12, 12]);
        assert!((r.convergence_ratio() - 0.4).abs() < 1e-15);
        assert_eq!(r.running(), vec![0, 2, 2, 2, 2]);
    }

    #[test]
    fn halting_rules() {
        assert!(halted(7, None, 7));
        assert!(halted(3, Some(&[2, 0, 0]), 7));
        assert!(!halted(3, None, 7));
        assert!(!halted(3, Some(&[2, 0, 1]), 7));
    }

    proptest! {
        #[test]
        fn fusion_matches_closed_form(ps in prop::collection::vec(0.01..0.99f64, 0..50)) {
            prop_assert!((trajectory_probability(ps.iter().copied()) - oracle(&ps)).abs() < 1e-12);
        }

        #[test]
        fn neutral_observations_change_nothing(ps in prop::collection::vec(0.01..0.99f64, 0..30), k in 0usize..40) {
            let base = trajectory_probability(ps.iter().copied());
            let more = trajectory_probability(ps.iter().copied().chain(std::iter::repeat_n(0.5, k)));
            prop_assert!((base - more).abs() < 1e-12);
        }

        #[test]
        fn evidence_moves_probability_monotonically(ps in prop::collection::vec(0.05..0.95f64, 0..20), q in 0.01..0.99f64) {
            prop_assume!((q - 0.5).abs() > 1e-3);
            let base = trajectory_probability(ps.iter().copied());
            let next = trajectory_probability(ps.iter().copied().chain([q]));
            if q > 0.5 { prop_assert!(next > base); } else { prop_assert!(next < base); }
        }

        #[test]
        fn order_does_not_matter(mut ps in prop::collection::vec(0.01..0.99f64, 0..30)) {
            let a = trajectory_probability(ps.iter().copied());
            ps.reverse();
            let b = trajectory_probability(ps.iter().copied());
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
