//! Multisensor multi-target tracker.
//!
//! Each step predicts every track to the frame time, then associates and
//! applies the detections of each detector in a fixed order. Unmatched
//! detections start candidate tracks, which are confirmed after
//! `init_hits` frames with a detection and closed once unseen for
//! `delete_after` seconds.

pub mod association;
pub mod kalman;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Detection, DetectorId, Timestamp, TrackId};
use crate::scalar::Scalar;

pub use association::{assign, associate, Association, Gate};
pub use kalman::{predict, update, NumericalBreakdown, TrackState};

/// Order in which detector streams are applied within a frame.
pub const UPDATE_ORDER: [DetectorId; 3] = [
    DetectorId::Leg,
    DetectorId::UpperBody,
    DetectorId::Cluster3D,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerParams<T> {
    pub accel_noise_std: T,
    pub gate_chi2: T,
    /// Euclidean cap on the innovation of an association, meters.
    pub max_innovation: T,
    pub init_hits: u32,
    /// Seconds without a detection before a track is closed.
    pub delete_after: f64,
    pub upper_body_noise_std: T,
    pub leg_noise_std: T,
    pub cluster_noise_std: T,
    /// Initial velocity standard deviation of a candidate track.
    pub init_speed_std: T,
}

impl<T: Scalar> Default for TrackerParams<T> {
    fn default() -> Self {
        Self {
            accel_noise_std: T::one(),
            gate_chi2: T::lit(9.21),
            max_innovation: T::lit(1.5),
            init_hits: 2,
            delete_after: 1.0,
            upper_body_noise_std: T::lit(0.15),
            leg_noise_std: T::lit(0.10),
            cluster_noise_std: T::lit(0.20),
            init_speed_std: T::lit(2.0),
        }
    }
}

impl<T: Scalar> TrackerParams<T> {
    pub fn obs_noise_std(&self, detector: DetectorId) -> T {
        match detector {
            DetectorId::UpperBody => self.upper_body_noise_std,
            DetectorId::Leg => self.leg_noise_std,
            DetectorId::Cluster3D | DetectorId::TrajectoryPrior => self.cluster_noise_std,
        }
    }

    pub fn obs_var(&self, detector: DetectorId) -> T {
        let s = self.obs_noise_std(detector);
        s * s
    }
}

/// One piece of evidence attached to a track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation<T> {
    pub stamp: Timestamp,
    pub detector: DetectorId,
    pub position: [T; 2],
    pub confidence: T,
}

/// Per-track history of filter states and associated evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub track: TrackId,
    /// Posterior mean after each frame with a detection, strictly increasing in time.
    pub states: Vec<(Timestamp, [T; 4])>,
    pub observations: Vec<Observation<T>>,
    pub confirmed: bool,
}

impl<T: Scalar> Trajectory<T> {
    fn new(track: TrackId) -> Self {
        Self {
            track,
            states: Vec::new(),
            observations: Vec::new(),
            confirmed: false,
        }
    }

    /// Length of the estimated path in meters.
    pub fn path_length(&self) -> T {
        self.states
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0].1, w[1].1);
                ((b[0] - a[0]) * (b[0] - a[0]) + (b[1] - a[1]) * (b[1] - a[1])).sqrt()
            })
            .sum()
    }

    pub fn duration(&self) -> f64 {
        match (self.states.first(), self.states.last()) {
            (Some(a), Some(b)) => b.0 .0 - a.0 .0,
            _ => 0.0,
        }
    }

    pub fn confidences(&self) -> impl Iterator<Item = T> + '_ {
        self.observations.iter().map(|o| o.confidence)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track<T> {
    pub id: TrackId,
    pub state: TrackState<T>,
    pub history: Trajectory<T>,
    pub detections_by_detector: BTreeMap<DetectorId, Vec<(Timestamp, T)>>,
    pub hits: u32,
    pub misses: u32,
    pub last_seen: Timestamp,
    first_fix: Option<([T; 2], Timestamp)>,
}

impl<T: Scalar> Track<T> {
    pub fn is_confirmed(&self) -> bool {
        self.history.confirmed
    }

    fn record(&mut self, obs: Observation<T>) {
        self.detections_by_detector
            .entry(obs.detector)
            .or_default()
            .push((obs.stamp, obs.confidence));
        self.history.observations.push(obs);
    }
}

/// Where one input detection ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    /// Index into the frame passed to [`Tracker::step`].
    pub detection: usize,
    pub track: TrackId,
    /// Whether the detection started a new candidate track.
    pub spawned: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutput<T> {
    pub assignments: Vec<Assignment>,
    /// Trajectories of tracks closed during this step.
    pub closed: Vec<Trajectory<T>>,
}

#[derive(Debug, Clone)]
pub struct Tracker<T> {
    params: TrackerParams<T>,
    tracks: Vec<Track<T>>,
    next_id: u64,
}

impl<T: Scalar> Tracker<T> {
    pub fn new(params: TrackerParams<T>) -> Self {
        Self {
            params,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    pub fn params(&self) -> &TrackerParams<T> {
        &self.params
    }

    pub fn tracks(&self) -> &[Track<T>] {
        &self.tracks
    }

    pub fn confirmed(&self) -> impl Iterator<Item = &Track<T>> {
        self.tracks.iter().filter(|t| t.is_confirmed())
    }

    pub fn track(&self, id: TrackId) -> Option<&Track<T>> {
        self.tracks.iter().find(|t| t.id == id)
    }

    /// Attaches evidence that did not come through association, such as a
    /// motion prior. Returns `false` for unknown tracks.
    pub fn add_evidence(&mut self, id: TrackId, obs: Observation<T>) -> bool {
        match self.tracks.iter_mut().find(|t| t.id == id) {
            Some(t) => {
                t.record(obs);
                true
            }
            None => false,
        }
    }

    /// Processes one frame of detections stamped `now`.
    ///
    /// Detections from [`DetectorId::TrajectoryPrior`] carry no position
    /// and are ignored here.
    pub fn step(&mut self, frame: &[Detection<T>], now: Timestamp) -> StepOutput<T> {
        let accel = self.params.accel_noise_std;
        for t in &mut self.tracks {
            let dt = T::lit((now.0 - t.state.last_update.0).max(0.0));
            t.state = predict(&t.state, dt, accel);
            t.state.last_update = now;
        }
        let mut updated = vec![false; self.tracks.len()];
        let mut assignments = Vec::new();

        for detector in UPDATE_ORDER {
            let idx: Vec<usize> = (0..frame.len())
                .filter(|&i| frame[i].detector == detector)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let obs_var = self.params.obs_var(detector);
            let positions: Vec<[T; 2]> = idx.iter().map(|&i| frame[i].position).collect();
            let states: Vec<TrackState<T>> = self.tracks.iter().map(|t| t.state).collect();
            let assoc = associate(
                &states,
                &positions,
                obs_var,
                Gate {
                    chi2: self.params.gate_chi2,
                    max_distance: self.params.max_innovation,
                },
            );

            let mut unmatched = assoc.unassigned_detections.clone();
            for &(ti, di, _) in &assoc.pairs {
                let det = &frame[idx[di]];
                let track = &mut self.tracks[ti];
                let next = match track.first_fix {
                    Some((p0, t0)) if now.0 > t0.0 => {
                        let dt = T::lit(now.0 - t0.0);
                        Ok(TrackState::from_two_points(
                            p0,
                            det.position,
                            dt,
                            obs_var,
                            now,
                        ))
                    }
                    _ => update(&track.state, det.position, obs_var),
                };
                match next {
                    Ok(s) => {
                        track.state = s;
                        track.first_fix = None;
                        track.record(Observation {
                            stamp: now,
                            detector,
                            position: det.position,
                            confidence: det.confidence,
                        });
                        updated[ti] = true;
                        assignments.push(Assignment {
                            detection: idx[di],
                            track: track.id,
                            spawned: false,
                        });
                    }
                    Err(NumericalBreakdown) => {
                        log::warn!(
                            "track {} numerical breakdown; detection left unassigned",
                            track.id
                        );
                        unmatched.push(di);
                    }
                }
            }
            unmatched.sort_unstable();
            for di in unmatched {
                let det = &frame[idx[di]];
                let id = TrackId(self.next_id);
                self.next_id += 1;
                let vel_var = self.params.init_speed_std * self.params.init_speed_std;
                let mut track = Track {
                    id,
                    state: TrackState::at_position(det.position, obs_var, vel_var, now),
                    history: Trajectory::new(id),
                    detections_by_detector: BTreeMap::new(),
                    hits: 0,
                    misses: 0,
                    last_seen: now,
                    first_fix: Some((det.position, now)),
                };
                track.record(Observation {
                    stamp: now,
                    detector,
                    position: det.position,
                    confidence: det.confidence,
                });
                self.tracks.push(track);
                updated.push(true);
                assignments.push(Assignment {
                    detection: idx[di],
                    track: id,
                    spawned: true,
                });
            }
        }

        for (t, &hit) in self.tracks.iter_mut().zip(&updated) {
            if hit {
                t.hits += 1;
                t.last_seen = now;
                t.history.states.push((now, t.state.mean));
                if t.hits >= self.params.init_hits {
                    t.history.confirmed = true;
                }
            } else {
                t.misses += 1;
            }
        }

        let delete_after = self.params.delete_after;
        let (stale, alive): (Vec<_>, Vec<_>) = self
            .tracks
            .drain(..)
            .partition(|t| now.0 - t.last_seen.0 > delete_after);
        self.tracks = alive;
        assignments.sort_by_key(|a| a.detection);
        StepOutput {
            assignments,
            closed: stale.into_iter().map(|t| t.history).collect(),
        }
    }

    /// Closes every remaining track.
    pub fn finish(&mut self) -> Vec<Trajectory<T>> {
        self.tracks.drain(..).map(|t| t.history).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leg(x: f64, y: f64, t: f64) -> Detection<f64> {
        Detection::point(Timestamp(t), DetectorId::Leg, [x, y], 0.6)
    }

    #[test]
    fn empty_frame_without_tracks_is_a_no_op() {
        let mut tr = Tracker::<f64>::new(Default::default());
        let out = tr.step(&[], Timestamp(0.0));
        assert!(out.assignments.is_empty() && out.closed.is_empty());
        assert!(tr.tracks().is_empty());
    }

    #[test]
    fn persistent_target_confirms_after_init_hits() {
        let mut tr = Tracker::<f64>::new(Default::default());
        tr.step(&[leg(2.0, 0.0, 0.0)], Timestamp(0.0));
        assert_eq!(tr.confirmed().count(), 0);
        tr.step(&[leg(2.1, 0.0, 0.1)], Timestamp(0.1));
        assert_eq!(tr.tracks().len(), 1);
        assert_eq!(tr.confirmed().count(), 1);
    }

    #[test]
    fn noiseless_constant_velocity_is_tracked_exactly() {
        let mut tr = Tracker::<f64>::new(Default::default());
        let truth = |t: f64| [1.0 + 1.2 * t, -2.0 + 0.4 * t];
        for k in 0..=20 {
            let t = k as f64 * 0.1;
            let p = truth(t);
            tr.step(&[leg(p[0], p[1], t)], Timestamp(t));
        }
        let track = &tr.tracks()[0];
        let e = truth(2.0);
        let err =
            ((track.state.mean[0] - e[0]).powi(2) + (track.state.mean[1] - e[1]).powi(2)).sqrt();
        assert!(err < 1e-6, "err {err}");
        assert!(track.state.is_spd());
    }

    #[test]
    fn unseen_tracks_close_and_emit_history() {
        let mut tr = Tracker::<f64>::new(Default::default());
        tr.step(&[leg(0.0, 0.0, 0.0)], Timestamp(0.0));
        tr.step(&[leg(0.0, 0.0, 0.1)], Timestamp(0.1));
        let out = tr.step(&[], Timestamp(0.5));
        assert!(out.closed.is_empty());
        let out = tr.step(&[], Timestamp(1.2));
        assert_eq!(out.closed.len(), 1);
        let traj = &out.closed[0];
        assert!(traj.confirmed);
        assert_eq!(traj.observations.len(), 2);
        assert!(traj.states.windows(2).all(|w| w[0].0 .0 < w[1].0 .0));
        assert!(tr.tracks().is_empty());
    }

    #[test]
    fn detectors_of_one_frame_fuse_into_one_track() {
        let mut tr = Tracker::<f64>::new(Default::default());
        let cam = |x, t| Detection::point(Timestamp(t), DetectorId::UpperBody, [x, 0.05], 0.8);
        for k in 0..5 {
            let t = k as f64 * 0.1;
            let out = tr.step(&[cam(3.0, t), leg(3.0, 0.0, t)], Timestamp(t));
            assert_eq!(out.assignments.len(), 2);
            assert_eq!(out.assignments[0].track, out.assignments[1].track);
        }
        let t = &tr.tracks()[0];
        assert_eq!(t.detections_by_detector[&DetectorId::Leg].len(), 5);
        assert_eq!(t.detections_by_detector[&DetectorId::UpperBody].len(), 5);
        assert_eq!(t.history.states.len(), 5);
    }

    #[test]
    fn evidence_can_be_attached_to_live_tracks() {
        let mut tr = Tracker::<f64>::new(Default::default());
        let out = tr.step(&[leg(0.0, 0.0, 0.0)], Timestamp(0.0));
        let id = out.assignments[0].track;
        let obs = Observation {
            stamp: Timestamp(0.0),
            detector: DetectorId::TrajectoryPrior,
            position: [0.0, 0.0],
            confidence: 0.7,
        };
        assert!(tr.add_evidence(id, obs));
        assert!(!tr.add_evidence(TrackId(99), obs));
        assert_eq!(tr.track(id).unwrap().history.observations.len(), 2);
    }
}
