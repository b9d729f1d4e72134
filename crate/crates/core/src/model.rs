//! Domain types shared by every stage of the pipeline.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Lowest confidence accepted at ingestion; odds stay finite and nonzero.
pub const CONFIDENCE_FLOOR: f64 = 1e-6;
/// Highest confidence accepted at ingestion.
pub const CONFIDENCE_CEIL: f64 = 1.0 - 1e-6;

/// Seconds since scenario start.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub f64);

impl Timestamp {
    pub fn seconds(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}s", self.0)
    }
}

/// Source of a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorId {
    /// RGB-D upper-body template detector (static).
    UpperBody,
    /// 2D LiDAR leg detector (static).
    Leg,
    /// 3D LiDAR cluster detector with the online classifier (dynamic).
    #[serde(rename = "cluster3d")]
    Cluster3D,
    /// Motion-only pseudo-detector evaluated on confirmed tracks.
    TrajectoryPrior,
}

impl DetectorId {
    pub const ALL: [DetectorId; 4] = [
        DetectorId::UpperBody,
        DetectorId::Leg,
        DetectorId::Cluster3D,
        DetectorId::TrajectoryPrior,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectorId::UpperBody => "upper_body",
            DetectorId::Leg => "leg",
            DetectorId::Cluster3D => "cluster3d",
            DetectorId::TrajectoryPrior => "trajectory_prior",
        }
    }
}

impl fmt::Display for DetectorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DetectorId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "upper_body" | "upperbody" | "camera" | "rgbd" => Ok(DetectorId::UpperBody),
            "leg" | "legs" | "lidar2d" | "2d" => Ok(DetectorId::Leg),
            "cluster3d" | "cluster" | "lidar3d" | "3d" => Ok(DetectorId::Cluster3D),
            "trajectory_prior" | "prior" | "trajectory" => Ok(DetectorId::TrajectoryPrior),
            other => Err(format!("unknown detector `{other}`")),
        }
    }
}

/// A single LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    /// Reflectance in `[0, 1]`.
    pub intensity: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T, z: T, intensity: T) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// Carrier for a 3D LiDAR scan. May be empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointCloud3D<T> {
    pub points: Vec<Point<T>>,
}

impl<T: Scalar> PointCloud3D<T> {
    pub fn new(points: Vec<Point<T>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Width, depth and height of an axis-aligned box (x, y, z extents).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims<T> {
    pub w: T,
    pub d: T,
    pub h: T,
}

impl<T: Scalar> Dims<T> {
    pub fn new(w: T, d: T, h: T) -> Self {
        Self { w, d, h }
    }
}

/// An objectness proposal: a segmented group of points with its box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster<T> {
    pub points: PointCloud3D<T>,
    /// Mean of the points.
    pub centroid: [T; 3],
    /// Axis-aligned box minimum corner.
    pub min: [T; 3],
    pub bounds: Dims<T>,
}

impl<T: Scalar> Cluster<T> {
    /// Builds a cluster from its points, computing centroid and box.
    ///
    /// Degenerate extents are widened to `min_extent` so the bounds stay
    /// strictly positive; the box stays centered on the points.
    pub fn from_points(points: Vec<Point<T>>, min_extent: T) -> Result<Self, ModelError> {
        if points.is_empty() {
            return Err(ModelError::EmptyCluster);
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        let n = T::from_usize(points.len()).unwrap();
        let mut lo = [T::infinity(); 3];
        let mut hi = [T::neg_infinity(); 3];
        let mut sum = [T::zero(); 3];
        for p in &points {
            for (k, v) in p.xyz().into_iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
                sum[k] = sum[k] + v;
            }
        }
        let half = T::lit(0.5);
        let mut ext = [T::zero(); 3];
        for k in 0..3 {
            let e = hi[k] - lo[k];
            if e < min_extent {
                let mid = (hi[k] + lo[k]) * half;
                lo[k] = mid - min_extent * half;
                ext[k] = min_extent;
            } else {
                ext[k] = e;
            }
        }
        Ok(Self {
            centroid: [sum[0] / n, sum[1] / n, sum[2] / n],
            min: lo,
            bounds: Dims::new(ext[0], ext[1], ext[2]),
            points: PointCloud3D::new(points),
        })
    }

    pub fn max(&self) -> [T; 3] {
        [
            self.min[0] + self.bounds.w,
            self.min[1] + self.bounds.d,
            self.min[2] + self.bounds.h,
        ]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the cluster invariants.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.points.is_empty() {
            return Err(ModelError::EmptyCluster);
        }
        let b = self.bounds;
        if !(b.w > T::zero() && b.d > T::zero() && b.h > T::zero()) {
            return Err(ModelError::NonPositiveBounds);
        }
        let hi = self.max();
        let eps = T::lit(1e-6);
        for k in 0..3 {
            let c = self.centroid[k];
            if !(c >= self.min[k] - eps && c <= hi[k] + eps) {
                return Err(ModelError::CentroidOutsideBounds);
            }
        }
        Ok(())
    }
}

/// One sensor's observation of a candidate at a timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub stamp: Timestamp,
    pub detector: DetectorId,
    /// World-frame (x, y) in meters.
    pub position: [T; 2],
    /// Probability in the open interval (0, 1).
    pub confidence: T,
    pub cluster: Option<Cluster<T>>,
}

impl<T: Scalar> Detection<T> {
    pub fn point(stamp: Timestamp, detector: DetectorId, position: [T; 2], confidence: T) -> Self {
        Self {
            stamp,
            detector,
            position,
            confidence,
            cluster: None,
        }
    }

    pub fn with_cluster(stamp: Timestamp, cluster: Cluster<T>, confidence: T) -> Self {
        Self {
            stamp,
            detector: DetectorId::Cluster3D,
            position: [cluster.centroid[0], cluster.centroid[1]],
            confidence,
            cluster: Some(cluster),
        }
    }
}

/// Binary human / non-human label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    NonHuman = 0,
    Human = 1,
}

impl BinaryLabel {
    pub fn from_bool(human: bool) -> Self {
        if human {
            BinaryLabel::Human
        } else {
            BinaryLabel::NonHuman
        }
    }

    pub fn is_human(self) -> bool {
        self == BinaryLabel::Human
    }

    /// `+1` for humans, `-1` otherwise.
    pub fn sign<T: Scalar>(self) -> T {
        if self.is_human() {
            T::one()
        } else {
            -T::one()
        }
    }
}

/// Track identifier, unique per tracker instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrackId(pub u64);

impl fmt::Display for TrackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A feature vector paired with its label and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample<T> {
    pub features: crate::features::FeatureVector<T>,
    pub label: BinaryLabel,
    pub source_track: Option<TrackId>,
    pub stamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("confidence {0} outside the open interval (0, 1)")]
    ConfidenceOutOfRange(String),
    #[error("cluster3d detection without a cluster payload")]
    MissingCluster,
    #[error("{0} detection must not carry a cluster payload")]
    UnexpectedCluster(DetectorId),
    #[error("cluster has no points")]
    EmptyCluster,
    #[error("cluster bounds must be strictly positive")]
    NonPositiveBounds,
    #[error("cluster centroid lies outside its bounding box")]
    CentroidOutsideBounds,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("negative timestamp")]
    NegativeTimestamp,
}

/// Accepts a detection iff every domain invariant holds.
pub fn validate_detection<T: Scalar>(d: &Detection<T>) -> Result<(), ModelError> {
    let c = d.confidence;
    if !(c > T::zero() && c < T::one()) {
        return Err(ModelError::ConfidenceOutOfRange(format!("{c}")));
    }
    if !(d.stamp.0 >= 0.0) {
        return Err(ModelError::NegativeTimestamp);
    }
    if !(d.position[0].is_finite() && d.position[1].is_finite()) {
        return Err(ModelError::NonFinite);
    }
    match (d.detector, &d.cluster) {
        (DetectorId::Cluster3D, None) => Err(ModelError::MissingCluster),
        (DetectorId::Cluster3D, Some(c)) => c.validate(),
        (other, Some(_)) => Err(ModelError::UnexpectedCluster(other)),
        (_, None) => Ok(()),
    }
}

/// Clamps a raw confidence into the accepted ingestion range.
pub fn clamp_confidence<T: Scalar>(p: T) -> T {
    crate::scalar::clamp(p, T::lit(CONFIDENCE_FLOOR), T::lit(CONFIDENCE_CEIL))
}
