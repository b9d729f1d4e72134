//! The closed online-learning loop and its offline counterparts.
//!
//! Per frame: featurize 3D clusters, score them with the current model,
//! track, attach motion-prior evidence, label, and retrain whenever a full
//! balanced batch is ready. The loop sees detections only; ground truth
//! supplied alongside is used for the label audit and nothing else.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::mpsc;
use std::thread;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    self, train_on, ClassifierConfig, ClassifierError, ClassifierModel, SampleStore, TrainReport,
};
use crate::evaluation::{Box3, TestFrame};
use crate::features::{extract, FeatureVector};
use crate::fusion::{
    assemble_batch, generate_positive_labels, halted, is_positive_candidate, is_volume_negative,
    log_odds, probability_from_log_odds, record_iteration, trajectory_prior_confidence,
    trajectory_probability, volume_filter_negatives, ClusterSample, FusionError, LabelCandidate,
    LabelGenConfig, SampleId, StabilityRecord,
};
use crate::model::{
    clamp_confidence, BinaryLabel, Detection, DetectorId, LabeledSample, Timestamp, TrackId,
};
use crate::simulator::SimFrame;
use crate::tracker::{Observation, Tracker, TrackerParams, Trajectory};

pub const SENSOR_ORIGIN: [f64; 3] = [0.0, 0.0, 0.0];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// Detector streams fed to the loop on top of the always-on 3D clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SensorCombination {
    pub upper_body: bool,
    pub leg: bool,
    pub trajectory_prior: bool,
}

impl SensorCombination {
    pub const THREE_D_PRIOR: Self = Self {
        upper_body: false,
        leg: false,
        trajectory_prior: true,
    };
    pub const CAMERA: Self = Self {
        upper_body: true,
        leg: false,
        trajectory_prior: false,
    };
    pub const LEG: Self = Self {
        upper_body: false,
        leg: true,
        trajectory_prior: false,
    };
    pub const FUSED: Self = Self {
        upper_body: true,
        leg: true,
        trajectory_prior: false,
    };

    /// The four configurations of the sensor comparison.
    pub const COMPARISON: [Self; 4] = [Self::THREE_D_PRIOR, Self::CAMERA, Self::LEG, Self::FUSED];

    pub fn accepts(&self, d: DetectorId) -> bool {
        match d {
            DetectorId::Cluster3D => true,
            DetectorId::UpperBody => self.upper_body,
            DetectorId::Leg => self.leg,
            DetectorId::TrajectoryPrior => false,
        }
    }

    /// Stable name such as `3d+camera+leg`.
    pub fn name(&self) -> String {
        let mut s = String::from("3d");
        for (on, tag) in [
            (self.upper_body, "camera"),
            (self.leg, "leg"),
            (self.trajectory_prior, "prior"),
        ] {
            if on {
                s.push('+');
                s.push_str(tag);
            }
        }
        s
    }
}

impl std::str::FromStr for SensorCombination {
    type Err = PipelineError;

    /// Comma- or plus-separated list of `camera`, `leg` and `prior`; `3d`
    /// and `none` add nothing.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut c = Self::default();
        for tok in s.split([',', '+']).map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_lowercase().as_str() {
                "camera" | "upper_body" | "rgbd" => c.upper_body = true,
                "leg" | "2d" | "lidar2d" => c.leg = true,
                "prior" | "trajectory_prior" => c.trajectory_prior = true,
                "3d" | "none" | "cluster3d" => {}
                other => {
                    return Err(PipelineError::InvalidConfig(format!(
                        "unknown sensor `{other}`"
                    )))
                }
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub combination: SensorCombination,
    pub labels: LabelGenConfig<f64>,
    pub classifier: ClassifierConfig<f64>,
    pub tracker: TrackerParams<f64>,
    /// Seeds the training-subset sampler.
    pub seed: u64,
    /// Feed classifier scores of 3D clusters into the trajectory evidence.
    pub dynamic_evidence: bool,
    /// Retrain on a worker thread and publish at the next frame boundary.
    pub async_retrain: bool,
    /// Window of the smoothed speed fed to the motion prior, seconds.
    pub prior_window: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            combination: SensorCombination::FUSED,
            labels: LabelGenConfig::default(),
            classifier: ClassifierConfig::default(),
            tracker: TrackerParams::default(),
            seed: 0,
            dynamic_evidence: true,
            async_retrain: false,
            prior_window: 1.0,
        }
    }
}

/// Detections of one frame. `human` optionally carries the true class of
/// each detection's source and feeds only the label audit.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnInput {
    pub stamp: Timestamp,
    pub detections: Vec<Detection<f64>>,
    pub human: Option<Vec<bool>>,
}

impl LearnInput {
    pub fn from_sim(frame: &SimFrame) -> Self {
        let human = (0..frame.detections.len())
            .map(|k| frame.truth.is_human_source(k))
            .collect();
        Self {
            stamp: frame.truth.stamp,
            detections: frame.detections.clone(),
            human: Some(human),
        }
    }

    pub fn without_truth(stamp: Timestamp, detections: Vec<Detection<f64>>) -> Self {
        Self {
            stamp,
            detections,
            human: None,
        }
    }
}

impl From<SimFrame> for LearnInput {
    fn from(frame: SimFrame) -> Self {
        let human = (0..frame.detections.len())
            .map(|k| frame.truth.is_human_source(k))
            .collect();
        Self {
            stamp: frame.truth.stamp,
            detections: frame.detections,
            human: Some(human),
        }
    }
}

/// How many generated labels agree with the generating agent's class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelAudit {
    pub positives: usize,
    pub negatives: usize,
    pub positives_correct: usize,
    pub negatives_correct: usize,
    /// Positives whose source class was not supplied.
    pub positives_unaudited: usize,
    pub negatives_unaudited: usize,
}

impl LabelAudit {
    /// Fraction of audited positive labels that came from humans.
    pub fn positive_precision(&self) -> Option<f64> {
        let audited = self.positives - self.positives_unaudited;
        (audited > 0).then(|| self.positives_correct as f64 / audited as f64)
    }

    pub fn negative_precision(&self) -> Option<f64> {
        let audited = self.negatives - self.negatives_unaudited;
        (audited > 0).then(|| self.negatives_correct as f64 / audited as f64)
    }

    fn record(&mut self, human: bool, truth: Option<bool>) {
        let (total, correct, unaudited) = if human {
            (
                &mut self.positives,
                &mut self.positives_correct,
                &mut self.positives_unaudited,
            )
        } else {
            (
                &mut self.negatives,
                &mut self.negatives_correct,
                &mut self.negatives_unaudited,
            )
        };
        *total += 1;
        match truth {
            Some(t) if t == human => *correct += 1,
            Some(_) => {}
            None => *unaudited += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    /// Time of the frame at which the model was published.
    pub stamp: f64,
    pub store_positives: usize,
    pub store_negatives: usize,
    pub support_vectors: usize,
    pub smo_iterations: usize,
    pub converged: bool,
    /// Correct classifications on the monitor set, if any.
    pub correct: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    /// One frozen model per iteration, in order.
    pub models: Vec<ClassifierModel<f64>>,
    pub iterations: Vec<IterationRecord>,
    pub stability: StabilityRecord,
    pub audit: LabelAudit,
    pub frames: usize,
    pub halted: bool,
    /// Labeled samples that never reached the store, queued batches included.
    pub pending_positives: usize,
    pub pending_negatives: usize,
}

/// Where the correct-count `u_i` is measured.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Monitor {
    /// No counts; halting uses the iteration cap only.
    None,
    /// Counts on the first assembled batch, reported but not used for halting.
    #[default]
    FirstBatch,
    /// Counts on a labeled validation set; a plateau halts the loop.
    Validation(Vec<LabeledSample<f64>>),
}

struct TrackEvidence {
    seen: usize,
    log_odds: f64,
}

type TrainJob =
    thread::JoinHandle<Result<(ClassifierModel<f64>, TrainReport<f64>), ClassifierError>>;

/// Incremental state of the online loop.
pub struct OnlineLearner {
    config: RunConfig,
    monitor: Monitor,
    tracker: Tracker<f64>,
    model: Option<ClassifierModel<f64>>,
    samples_by_track: HashMap<TrackId, Vec<ClusterSample<f64>>>,
    evidence: HashMap<TrackId, TrackEvidence>,
    truth_of: HashMap<SampleId, bool>,
    labeled: HashSet<SampleId>,
    pending_pos: VecDeque<LabeledSample<f64>>,
    pending_neg: VecDeque<LabeledSample<f64>>,
    monitor_set: Vec<LabeledSample<f64>>,
    store: SampleStore<f64>,
    rng: ChaCha8Rng,
    next_sample: SampleId,
    last_check: f64,
    models: Vec<ClassifierModel<f64>>,
    iterations: Vec<IterationRecord>,
    stability: StabilityRecord,
    audit: LabelAudit,
    frames: usize,
    halted: bool,
    queued_batches: VecDeque<Vec<LabeledSample<f64>>>,
    job: Option<(TrainJob, mpsc::Receiver<()>)>,
}

impl OnlineLearner {
    pub fn new(config: RunConfig, monitor: Monitor) -> Result<Self, PipelineError> {
        if !config.labels.is_valid() {
            return Err(PipelineError::InvalidConfig(
                "label generation parameters are out of range".into(),
            ));
        }
        Ok(Self {
            tracker: Tracker::new(config.tracker),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            monitor,
            config,
            model: None,
            samples_by_track: HashMap::new(),
            evidence: HashMap::new(),
            truth_of: HashMap::new(),
            labeled: HashSet::new(),
            pending_pos: VecDeque::new(),
            pending_neg: VecDeque::new(),
            monitor_set: Vec::new(),
            store: SampleStore::new(),
            next_sample: 0,
            last_check: 0.0,
            models: Vec::new(),
            iterations: Vec::new(),
            stability: StabilityRecord::default(),
            audit: LabelAudit::default(),
            frames: 0,
            halted: false,
            queued_batches: VecDeque::new(),
            job: None,
        })
    }

    pub fn model(&self) -> Option<&ClassifierModel<f64>> {
        self.model.as_ref()
    }

    pub fn store(&self) -> &SampleStore<f64> {
        &self.store
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn audit(&self) -> LabelAudit {
        self.audit
    }

    fn score(&self, features: &FeatureVector<f64>) -> Result<f64, PipelineError> {
        match (&self.model, self.config.dynamic_evidence) {
            (Some(m), true) => Ok(m.predict_proba(features)?),
            _ => Ok(0.5),
        }
    }

    fn track_probability(&mut self, id: TrackId) -> f64 {
        let Some(track) = self.tracker.track(id) else {
            return 0.5;
        };
        let e = self.evidence.entry(id).or_insert(TrackEvidence {
            seen: 0,
            log_odds: 0.0,
        });
        for o in &track.history.observations[e.seen..] {
            e.log_odds += log_odds(clamp_confidence(o.confidence));
        }
        e.seen = track.history.observations.len();
        probability_from_log_odds(e.log_odds)
    }

    fn audit_labels(&mut self, human: bool, ids: &[SampleId]) {
        for id in ids {
            self.audit.record(human, self.truth_of.get(id).copied());
        }
    }

    /// `tracks` holds each trajectory's probability and support stamps.
    fn label_tracks(&mut self, tracks: &[(TrackId, f64, Vec<f64>)]) {
        let sigma = self.config.labels.sigma_t;
        let view: Vec<LabelCandidate<'_, f64>> = tracks
            .iter()
            .filter_map(|(id, p, support)| {
                let samples = self.samples_by_track.get(id)?;
                Some(LabelCandidate {
                    track: *id,
                    probability: *p,
                    samples,
                    support,
                })
            })
            .collect();
        let ids: Vec<SampleId> = view
            .iter()
            .filter(|c| c.probability >= sigma)
            .flat_map(|c| {
                c.samples
                    .iter()
                    .filter(|s| is_positive_candidate(s, c.support, &self.config.labels))
                    .map(|s| s.id)
            })
            .filter(|id| !self.labeled.contains(id))
            .collect();
        let labels = generate_positive_labels(&view, &self.config.labels, &mut self.labeled);
        debug_assert_eq!(labels.len(), ids.len());
        self.audit_labels(true, &ids);
        self.pending_pos.extend(labels);
    }

    /// Processes one frame. Returns the iterations published during it.
    pub fn ingest(&mut self, input: &LearnInput) -> Result<Vec<IterationRecord>, PipelineError> {
        let mut published = self.poll_job(input.stamp, false)?;
        if self.halted {
            return Ok(published);
        }
        self.frames += 1;
        let now = input.stamp;

        let mut frame = Vec::new();
        let mut cluster_of_frame: HashMap<usize, ClusterSample<f64>> = HashMap::new();
        for (k, d) in input.detections.iter().enumerate() {
            if !self.config.combination.accepts(d.detector) {
                continue;
            }
            if d.detector == DetectorId::Cluster3D {
                let Some(cluster) = &d.cluster else { continue };
                let Ok(features) = extract(cluster, SENSOR_ORIGIN) else {
                    continue;
                };
                let confidence = self.score(&features)?;
                let id = self.next_sample;
                self.next_sample += 1;
                if let Some(h) = input.human.as_ref().and_then(|h| h.get(k)) {
                    self.truth_of.insert(id, *h);
                }
                cluster_of_frame.insert(
                    frame.len(),
                    ClusterSample {
                        id,
                        features,
                        bounds: cluster.bounds,
                        stamp: now,
                    },
                );
                frame.push(Detection::point(
                    now,
                    DetectorId::Cluster3D,
                    d.position,
                    confidence,
                ));
            } else {
                frame.push(Detection::point(now, d.detector, d.position, d.confidence));
            }
        }

        let out = self.tracker.step(&frame, now);
        let mut on_track: Vec<(ClusterSample<f64>, TrackId)> = Vec::new();
        for a in &out.assignments {
            if let Some(s) = cluster_of_frame.remove(&a.detection) {
                self.samples_by_track
                    .entry(a.track)
                    .or_default()
                    .push(s.clone());
                on_track.push((s, a.track));
            }
        }

        if self.config.combination.trajectory_prior {
            let window = self.config.prior_window;
            let prior: Vec<(TrackId, Observation<f64>)> = self
                .tracker
                .confirmed()
                .filter(|t| t.last_seen == now)
                .filter_map(|t| {
                    let speed = smoothed_speed(&t.history, window)?;
                    let obs = Observation {
                        stamp: now,
                        detector: DetectorId::TrajectoryPrior,
                        position: t.state.position(),
                        confidence: trajectory_prior_confidence(speed),
                    };
                    Some((t.id, obs))
                })
                .collect();
            for (id, obs) in prior {
                self.tracker.add_evidence(id, obs);
            }
        }

        let sigma = self.config.labels.sigma_t;
        let flagged: Vec<(ClusterSample<f64>, bool)> = on_track
            .into_iter()
            .map(|(s, id)| {
                let p = self.track_probability(id);
                (s, p >= sigma)
            })
            .collect();
        let view: Vec<(&ClusterSample<f64>, bool)> = flagged.iter().map(|(s, c)| (s, *c)).collect();
        let neg_ids: Vec<SampleId> = view
            .iter()
            .filter(|(s, c)| {
                !c && is_volume_negative(&s.bounds, &self.config.labels.volume_bounds)
                    && !self.labeled.contains(&s.id)
            })
            .map(|(s, _)| s.id)
            .collect();
        let negatives = volume_filter_negatives(&view, &self.config.labels, &mut self.labeled);
        debug_assert_eq!(negatives.len(), neg_ids.len());
        self.audit_labels(false, &neg_ids);
        self.pending_neg.extend(negatives);

        let closed: Vec<Trajectory<f64>> = out.closed;
        let mut to_label = Vec::new();
        for t in closed.iter().filter(|t| t.confirmed) {
            to_label.push((
                t.track,
                trajectory_probability(t.confidences().map(clamp_confidence)),
                support_stamps(t),
            ));
        }
        if now.0 - self.last_check >= self.config.labels.active_check_interval {
            self.last_check = now.0;
            let active: Vec<(TrackId, Vec<f64>)> = self
                .tracker
                .confirmed()
                .map(|t| (t.id, support_stamps(&t.history)))
                .collect();
            for (id, support) in active {
                let p = self.track_probability(id);
                to_label.push((id, p, support));
            }
        }
        self.label_tracks(&to_label);
        for t in &closed {
            self.samples_by_track.remove(&t.track);
            self.evidence.remove(&t.track);
        }

        while let Some(batch) = assemble_batch(
            &mut self.pending_pos,
            &mut self.pending_neg,
            &self.config.labels,
        ) {
            if self.monitor_set.is_empty() && self.monitor == Monitor::FirstBatch {
                self.monitor_set = batch.clone();
            }
            self.queued_batches.push_back(batch);
        }
        published.extend(self.poll_job(now, true)?);
        Ok(published)
    }

    fn spawn_job(&mut self) {
        let store = self.store.clone();
        let config = self.config.classifier;
        let previous = self.models.last().cloned();
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng.random());
        let (tx, rx) = mpsc::channel();
        let handle = thread::spawn(move || {
            let r = classifier::train(&store, &config, previous.as_ref(), &mut rng);
            let _ = tx.send(());
            r
        });
        self.job = Some((handle, rx));
    }

    /// Starts or collects retraining work.
    fn poll_job(
        &mut self,
        now: Timestamp,
        may_start: bool,
    ) -> Result<Vec<IterationRecord>, PipelineError> {
        let mut published = Vec::new();
        loop {
            if let Some((_, rx)) = &self.job {
                let done = if self.config.async_retrain {
                    rx.try_recv().is_ok()
                } else {
                    rx.recv().is_ok()
                };
                if !done {
                    return Ok(published);
                }
                let (handle, _) = self.job.take().expect("job present");
                let (model, report) = handle.join().expect("training thread panicked")?;
                published.push(self.publish(model, report, now)?);
                if self.halted {
                    return Ok(published);
                }
                continue;
            }
            if !may_start || self.halted {
                return Ok(published);
            }
            let Some(batch) = self.queued_batches.pop_front() else {
                return Ok(published);
            };
            self.store.extend(batch);
            if self.config.async_retrain {
                self.spawn_job();
                return Ok(published);
            }
            let previous = self.models.last();
            let (model, report) = classifier::train(
                &self.store,
                &self.config.classifier,
                previous,
                &mut self.rng,
            )?;
            published.push(self.publish(model, report, now)?);
        }
    }

    fn publish(
        &mut self,
        model: ClassifierModel<f64>,
        report: TrainReport<f64>,
        now: Timestamp,
    ) -> Result<IterationRecord, PipelineError> {
        let correct = match &self.monitor {
            Monitor::None => None,
            Monitor::FirstBatch => Some(record_iteration(
                &mut self.stability,
                &model,
                &self.monitor_set,
            )?),
            Monitor::Validation(v) => Some(record_iteration(&mut self.stability, &model, v)?),
        };
        let rec = IterationRecord {
            iteration: model.iteration,
            stamp: now.0,
            store_positives: self.store.count(BinaryLabel::Human),
            store_negatives: self.store.count(BinaryLabel::NonHuman),
            support_vectors: report.support_vectors,
            smo_iterations: report.smo_iterations,
            converged: report.converged,
            correct,
        };
        log::info!(
            "iteration {} at t={:.1}s: {} samples, {} support vectors",
            rec.iteration,
            now.0,
            report.samples,
            report.support_vectors
        );
        let increments = self.stability.increments();
        let plateau =
            matches!(self.monitor, Monitor::Validation(_)).then_some(increments.as_slice());
        self.halted = halted(model.iteration, plateau, self.config.labels.max_iterations);
        self.model = Some(model.clone());
        self.models.push(model);
        self.iterations.push(rec);
        Ok(rec)
    }

    /// Waits for outstanding training and returns the run summary.
    pub fn finish(mut self) -> Result<LearnOutcome, PipelineError> {
        let stamp = Timestamp(self.iterations.last().map_or(0.0, |r| r.stamp));
        if self.job.is_some() && !self.halted {
            self.config.async_retrain = false;
            self.poll_job(stamp, false)?;
        }
        let queued = |human: bool| {
            self.queued_batches
                .iter()
                .flatten()
                .filter(|s| (s.label == BinaryLabel::Human) == human)
                .count()
        };
        let pending_positives = self.pending_pos.len() + queued(true);
        let pending_negatives = self.pending_neg.len() + queued(false);
        Ok(LearnOutcome {
            models: self.models,
            iterations: self.iterations,
            stability: self.stability,
            audit: self.audit,
            frames: self.frames,
            halted: self.halted,
            pending_positives,
            pending_negatives,
        })
    }
}

/// Ascending stamps of human evidence not produced by the classifier.
pub fn support_stamps(history: &Trajectory<f64>) -> Vec<f64> {
    history
        .observations
        .iter()
        .filter(|o| o.detector != DetectorId::Cluster3D && o.confidence > 0.5)
        .map(|o| o.stamp.0)
        .collect()
}

/// Mean speed over the last `window` seconds of a trajectory, once it
/// spans that long.
pub fn smoothed_speed(history: &Trajectory<f64>, window: f64) -> Option<f64> {
    let (t1, s1) = *history.states.last()?;
    let k = history
        .states
        .partition_point(|(t, _)| t.0 <= t1.0 - window);
    let (t0, s0) = *history.states.get(k.checked_sub(1)?)?;
    let dt = t1.0 - t0.0;
    (dt > 0.0).then(|| (s1[0] - s0[0]).hypot(s1[1] - s0[1]) / dt)
}

/// Runs the loop over `frames` until it halts or the input ends.
pub fn learn<I>(
    frames: I,
    config: &RunConfig,
    monitor: Monitor,
) -> Result<LearnOutcome, PipelineError>
where
    I: IntoIterator,
    I::Item: Into<LearnInput>,
{
    let mut learner = OnlineLearner::new(config.clone(), monitor)?;
    for f in frames {
        learner.ingest(&f.into())?;
        if learner.is_halted() {
            break;
        }
    }
    learner.finish()
}

/// Ground-truth candidate samples of one frame: `(features, human)`.
pub fn truth_samples(frame: &SimFrame) -> Vec<(FeatureVector<f64>, bool)> {
    frame
        .detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.detector == DetectorId::Cluster3D)
        .filter_map(|(k, d)| {
            let f = extract(d.cluster.as_ref()?, SENSOR_ORIGIN).ok()?;
            Some((f, frame.truth.is_human_source(k)))
        })
        .collect()
}

/// Supervised baseline on up to `per_class` randomly chosen samples of
/// each class, drawn uniformly from the whole run.
pub fn train_offline<I>(
    frames: I,
    per_class: usize,
    config: &ClassifierConfig<f64>,
    seed: u64,
) -> Result<ClassifierModel<f64>, PipelineError>
where
    I: IntoIterator<Item = SimFrame>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Reservoirs per class: index 0 non-human, 1 human.
    let mut pools: [Vec<FeatureVector<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut seen = [0usize; 2];
    for frame in frames {
        for (f, human) in truth_samples(&frame) {
            let c = human as usize;
            seen[c] += 1;
            if pools[c].len() < per_class {
                pools[c].push(f);
            } else {
                let j = rng.random_range(0..seen[c]);
                if j < per_class {
                    pools[c][j] = f;
                }
            }
        }
    }
    if pools[0].is_empty() || pools[1].is_empty() {
        return Err(PipelineError::InsufficientData(format!(
            "{} human and {} non-human samples",
            pools[1].len(),
            pools[0].len()
        )));
    }
    // 1:1 by downsampling the larger class.
    let n = pools[0].len().min(pools[1].len());
    let mut x = Vec::with_capacity(2 * n);
    let mut human = Vec::with_capacity(2 * n);
    for (c, pool) in pools.iter().enumerate() {
        let mut idx = index::sample(&mut rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        for i in idx {
            x.push(&pool[i]);
            human.push(c == 1);
        }
    }
    Ok(train_on(&x, &human, config, None, 1)?.0)
}

/// Annotated test frame from a simulated frame: every 3D cluster is a
/// candidate and every human inside LiDAR coverage is ground truth.
pub fn test_frame(frame: &SimFrame, lidar_covers: impl Fn([f64; 2]) -> bool) -> TestFrame<f64> {
    let candidates = frame
        .detections
        .iter()
        .filter(|d| d.detector == DetectorId::Cluster3D)
        .filter_map(|d| {
            let c = d.cluster.as_ref()?;
            let f = extract(c, SENSOR_ORIGIN).ok()?;
            Some((f, Box3::new(c.min, c.max())))
        })
        .collect();
    let humans = frame
        .truth
        .agents
        .iter()
        .filter(|a| a.kind.is_human() && lidar_covers(a.position))
        .map(|a| a.bbox())
        .collect();
    TestFrame { candidates, humans }
}

/// `count` frames spread evenly over a simulation.
pub fn build_test_set<I>(
    frames: I,
    total: usize,
    count: usize,
    lidar_covers: impl Fn([f64; 2]) -> bool,
) -> Vec<TestFrame<f64>>
where
    I: IntoIterator<Item = SimFrame>,
{
    let stride = (total / count.max(1)).max(1);
    frames
        .into_iter()
        .enumerate()
        .filter(|(k, _)| k % stride == 0)
        .take(count)
        .map(|(_, f)| test_frame(&f, &lidar_covers))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{AgentKind, AgentSpec, ScenarioConfig, Simulator};

    #[test]
    fn smoothed_speed_uses_the_window_endpoints() {
        let mut h = Trajectory {
            track: TrackId(0),
            states: Vec::new(),
            observations: Vec::new(),
            confirmed: true,
        };
        assert_eq!(smoothed_speed(&h, 1.0), None);
        for k in 0..=20 {
            let t = k as f64 * 0.1;
            // 1 m/s along x with alternating 5 cm jitter in y.
            h.states.push((
                Timestamp(t),
                [t, if k % 2 == 0 { 0.05 } else { -0.05 }, 0.0, 0.0],
            ));
        }
        let v = smoothed_speed(&h, 1.0).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
        h.states.truncate(5);
        assert_eq!(smoothed_speed(&h, 1.0), None);
    }

    #[test]
    fn only_independent_human_evidence_supports_labels() {
        let obs = |detector, t, confidence| Observation {
            stamp: Timestamp(t),
            detector,
            position: [0.0, 0.0],
            confidence,
        };
        let h = Trajectory {
            track: TrackId(0),
            states: Vec::new(),
            observations: vec![
                obs(DetectorId::Cluster3D, 0.0, 0.9),
                obs(DetectorId::Leg, 0.1, 0.6),
                obs(DetectorId::TrajectoryPrior, 0.2, 0.5),
                obs(DetectorId::UpperBody, 0.3, 0.8),
                obs(DetectorId::TrajectoryPrior, 0.4, 0.7),
            ],
            confirmed: true,
        };
        assert_eq!(support_stamps(&h), [0.1, 0.3, 0.4]);
    }

    #[test]
    fn combination_names_and_parsing() {
        assert_eq!(SensorCombination::FUSED.name(), "3d+camera+leg");
        assert_eq!(SensorCombination::THREE_D_PRIOR.name(), "3d+prior");
        assert_eq!(
            "camera,leg".parse::<SensorCombination>().unwrap(),
            SensorCombination::FUSED
        );
        assert_eq!(
            "3d+prior".parse::<SensorCombination>().unwrap(),
            SensorCombination::THREE_D_PRIOR
        );
        assert_eq!(
            "".parse::<SensorCombination>().unwrap(),
            SensorCombination::default()
        );
        assert!("sonar".parse::<SensorCombination>().is_err());
    }

    fn small_scene(seed: u64, duration: f64) -> ScenarioConfig {
        let walker = |y: f64| AgentSpec {
            kind: AgentKind::Walker,
            waypoints: vec![[2.0, y], [4.5, y + 0.5]],
            speed: 0.8,
            dims: [0.5, 0.4, 1.7],
            reflectance: None,
        };
        let table = |x: f64, y: f64| AgentSpec {
            kind: AgentKind::Clutter,
            waypoints: vec![[x, y]],
            speed: 0.0,
            dims: [1.5, 0.8, 0.75],
            reflectance: None,
        };
        ScenarioConfig {
            duration,
            seed,
            agents: vec![
                walker(-1.0),
                walker(1.2),
                table(-4.0, 3.0),
                table(-5.0, -4.0),
                table(6.0, 6.0),
            ],
            ..ScenarioConfig::default()
        }
    }

    fn quick_config() -> RunConfig {
        RunConfig {
            labels: LabelGenConfig {
                pos_batch: 40,
                neg_batch: 40,
                max_iterations: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn loop_trains_until_the_iteration_cap() {
        let out = learn(
            Simulator::new(small_scene(1, 60.0)).unwrap(),
            &quick_config(),
            Monitor::FirstBatch,
        )
        .unwrap();
        assert!(out.halted);
        assert_eq!(out.models.len(), 3);
        for (k, r) in out.iterations.iter().enumerate() {
            assert_eq!(r.iteration, k as u64 + 1);
            assert_eq!(r.store_positives, 40 * (k + 1));
            assert_eq!(r.store_negatives, 40 * (k + 1));
        }
        assert_eq!(out.stability.correct.len(), 3);
        assert_eq!(out.audit.positive_precision(), Some(1.0));
    }

    #[test]
    fn literal_confidences_without_prior_never_label_positives() {
        let mut scene = small_scene(2, 30.0);
        scene.literal_confidence = true;
        let config = RunConfig {
            combination: SensorCombination::default(),
            ..quick_config()
        };
        let out = learn(Simulator::new(scene).unwrap(), &config, Monitor::None).unwrap();
        assert_eq!(out.audit.positives, 0);
        assert!(out.models.is_empty());
        assert_eq!(out.pending_positives, 0);
    }

    #[test]
    fn async_retraining_publishes_the_same_number_of_models() {
        let config = RunConfig {
            async_retrain: true,
            ..quick_config()
        };
        let out = learn(
            Simulator::new(small_scene(1, 60.0)).unwrap(),
            &config,
            Monitor::None,
        )
        .unwrap();
        assert_eq!(out.models.len(), 3);
        assert!(out
            .models
            .windows(2)
            .all(|w| w[0].iteration + 1 == w[1].iteration));
    }

    #[test]
    fn reruns_are_identical() {
        let a = learn(
            Simulator::new(small_scene(3, 40.0)).unwrap(),
            &quick_config(),
            Monitor::FirstBatch,
        )
        .unwrap();
        let b = learn(
            Simulator::new(small_scene(3, 40.0)).unwrap(),
            &quick_config(),
            Monitor::FirstBatch,
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a
            .models
            .iter()
            .zip(&b.models)
            .all(|(x, y)| x.save() == y.save()));
    }

    #[test]
    fn offline_baseline_requires_both_classes() {
        let scene = ScenarioConfig {
            duration: 2.0,
            agents: vec![small_scene(0, 1.0).agents[0].clone()],
            ..ScenarioConfig::default()
        }
        .noiseless();
        let r = train_offline(
            Simulator::new(scene).unwrap(),
            100,
            &ClassifierConfig::default(),
            0,
        );
        assert!(matches!(r, Err(PipelineError::InsufficientData(_))));
        let m = train_offline(
            Simulator::new(small_scene(4, 20.0)).unwrap(),
            100,
            &ClassifierConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(m.iteration, 1);
    }

    #[test]
    fn test_frames_pair_clusters_with_human_boxes() {
        let mut sim = Simulator::new(small_scene(5, 1.0).noiseless()).unwrap();
        let covers = {
            let s = sim.config().sensors.cluster3d.clone();
            move |p| s.covers(p)
        };
        let t = test_frame(&sim.next().unwrap(), covers);
        assert_eq!(t.humans.len(), 2);
        assert_eq!(t.candidates.len(), 5);
    }
}
