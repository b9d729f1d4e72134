//! Line-delimited JSON logs of simulated runs.
//!
//! A run produces two streams with one line per frame: the detection log
//! that the learning loop consumes, and the ground-truth log that only
//! offline training and evaluation read. Line `k` of both files describes
//! the same frame, and `sources[j]` of a truth line names the agent behind
//! detection `j` of the matching detection line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{Cluster, Detection, DetectorId, Dims, Point, PointCloud3D, Timestamp};
use crate::simulator::{AgentKind, AgentState, GroundTruthFrame, SimFrame};

/// File name of the detection stream inside a log directory.
pub const DETECTIONS_FILE: &str = "detections.jsonl";
/// File name of the ground-truth stream inside a log directory.
pub const TRUTH_FILE: &str = "truth.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: {source}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("detection and truth logs disagree at frame {frame}: {message}")]
    Mismatch { frame: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    /// `[x, y, z, intensity]` per point.
    pub points: Vec<[f64; 4]>,
    pub bounds: BoundsRecord,
    pub centroid: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsRecord {
    pub min: [f64; 3],
    /// Width, depth and height.
    pub dims: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub detector: DetectorId,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterRecord>,
}

/// One line of the detection log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: f64,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: usize,
    pub kind: AgentKind,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub dims: [f64; 3],
    pub reflectance: [f64; 2],
}

/// One line of the ground-truth log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub t: f64,
    pub agents: Vec<AgentRecord>,
    pub sources: Vec<Option<usize>>,
}

impl From<&Detection<f64>> for DetectionRecord {
    fn from(d: &Detection<f64>) -> Self {
        Self {
            detector: d.detector,
            x: d.position[0],
            y: d.position[1],
            confidence: d.confidence,
            cluster: d.cluster.as_ref().map(|c| ClusterRecord {
                points: c
                    .points
                    .points
                    .iter()
                    .map(|p| [p.x, p.y, p.z, p.intensity])
                    .collect(),
                bounds: BoundsRecord {
                    min: c.min,
                    dims: [c.bounds.w, c.bounds.d, c.bounds.h],
                },
                centroid: c.centroid,
            }),
        }
    }
}

impl DetectionRecord {
    pub fn to_detection(&self, stamp: Timestamp) -> Detection<f64> {
        let cluster = self.cluster.as_ref().map(|c| Cluster {
            points: PointCloud3D::new(
                c.points
                    .iter()
                    .map(|&[x, y, z, i]| Point::new(x, y, z, i))
                    .collect(),
            ),
            centroid: c.centroid,
            min: c.bounds.min,
            bounds: Dims::new(c.bounds.dims[0], c.bounds.dims[1], c.bounds.dims[2]),
        });
        Detection {
            stamp,
            detector: self.detector,
            position: [self.x, self.y],
            confidence: self.confidence,
            cluster,
        }
    }
}

impl FrameRecord {
    pub fn new(stamp: Timestamp, detections: &[Detection<f64>]) -> Self {
        Self {
            t: stamp.0,
            detections: detections.iter().map(DetectionRecord::from).collect(),
        }
    }

    pub fn stamp(&self) -> Timestamp {
        Timestamp(self.t)
    }

    pub fn to_detections(&self) -> Vec<Detection<f64>> {
        self.detections
            .iter()
            .map(|d| d.to_detection(self.stamp()))
            .collect()
    }

    fn check(&self) -> Result<(), String> {
        if !self.t.is_finite() {
            return Err("non-finite timestamp".into());
        }
        for (k, d) in self.detections.iter().enumerate() {
            if !(d.confidence > 0.0 && d.confidence < 1.0) {
                return Err(format!(
                    "detection {k}: confidence {} outside (0, 1)",
                    d.confidence
                ));
            }
            if (d.detector == DetectorId::Cluster3D) != d.cluster.is_some() {
                return Err(format!(
                    "detection {k}: only cluster detections carry a cluster"
                ));
            }
            if let Some(c) = &d.cluster {
                if c.points.is_empty() || c.bounds.dims.iter().any(|&e| !(e > 0.0)) {
                    return Err(format!(
                        "detection {k}: empty cluster or non-positive bounds"
                    ));
                }
            }
        }
        Ok(())
    }
}

impl From<&GroundTruthFrame> for TruthRecord {
    fn from(g: &GroundTruthFrame) -> Self {
        Self {
            t: g.stamp.0,
            agents: g
                .agents
                .iter()
                .map(|a| AgentRecord {
                    agent_id: a.id,
                    kind: a.kind,
                    x: a.position[0],
                    y: a.position[1],
                    vx: a.velocity[0],
                    vy: a.velocity[1],
                    dims: a.dims,
                    reflectance: a.reflectance,
                })
                .collect(),
            sources: g.sources.clone(),
        }
    }
}

impl From<&TruthRecord> for GroundTruthFrame {
    fn from(r: &TruthRecord) -> Self {
        Self {
            stamp: Timestamp(r.t),
            agents: r
                .agents
                .iter()
                .map(|a| AgentState {
                    id: a.agent_id,
                    kind: a.kind,
                    position: [a.x, a.y],
                    velocity: [a.vx, a.vy],
                    dims: a.dims,
                    reflectance: a.reflectance,
                })
                .collect(),
            sources: r.sources.clone(),
        }
    }
}

/// Writes both streams of a run into `dir`, one line per frame.
pub struct LogWriter {
    detections: BufWriter<File>,
    truth: BufWriter<File>,
    dir: PathBuf,
    frames: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>, LogError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| LogError::Io {
            path: path.to_owned(),
            source,
        })
}

impl LogWriter {
    pub fn create(dir: &Path) -> Result<Self, LogError> {
        std::fs::create_dir_all(dir).map_err(|source| LogError::Io {
            path: dir.to_owned(),
            source,
        })?;
        Ok(Self {
            detections: create(&dir.join(DETECTIONS_FILE))?,
            truth: create(&dir.join(TRUTH_FILE))?,
            dir: dir.to_owned(),
            frames: 0,
        })
    }

    pub fn write(&mut self, frame: &SimFrame) -> Result<(), LogError> {
        let det = FrameRecord::new(frame.truth.stamp, &frame.detections);
        line(&mut self.detections, &det, &self.dir.join(DETECTIONS_FILE))?;
        line(
            &mut self.truth,
            &TruthRecord::from(&frame.truth),
            &self.dir.join(TRUTH_FILE),
        )?;
        self.frames += 1;
        Ok(())
    }

    /// Flushes both files and returns the number of frames written.
    pub fn finish(mut self) -> Result<usize, LogError> {
        for (w, name) in [
            (&mut self.detections, DETECTIONS_FILE),
            (&mut self.truth, TRUTH_FILE),
        ] {
            w.flush().map_err(|source| LogError::Io {
                path: self.dir.join(name),
                source,
            })?;
        }
        Ok(self.frames)
    }
}

fn line<T: Serialize>(w: &mut impl Write, record: &T, path: &Path) -> Result<(), LogError> {
    let io_err = |source| LogError::Io {
        path: path.to_owned(),
        source,
    };
    serde_json::to_writer(&mut *w, record).map_err(|e| io_err(e.into()))?;
    w.write_all(b"\n").map_err(io_err)
}

/// Streams the records of one JSONL file, skipping blank lines.
pub struct JsonLines<T> {
    lines: io::Lines<BufReader<File>>,
    path: PathBuf,
    line: usize,
    _record: std::marker::PhantomData<T>,
}

impl<T: for<'de> Deserialize<'de>> JsonLines<T> {
    pub fn open(path: &Path) -> Result<Self, LogError> {
        let file = File::open(path).map_err(|source| LogError::Io {
            path: path.to_owned(),
            source,
        })?;
        Ok(Self {
            lines: BufReader::new(file).lines(),
            path: path.to_owned(),
            line: 0,
            _record: std::marker::PhantomData,
        })
    }
}

impl<T: for<'de> Deserialize<'de>> Iterator for JsonLines<T> {
    type Item = Result<T, LogError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = self.lines.next()?;
            self.line += 1;
            let text = match text {
                Ok(t) => t,
                Err(source) => {
                    return Some(Err(LogError::Io {
                        path: self.path.clone(),
                        source,
                    }))
                }
            };
            if text.trim().is_empty() {
                continue;
            }
            return Some(
                serde_json::from_str(&text).map_err(|source| LogError::Parse {
                    path: self.path.clone(),
                    line: self.line,
                    source,
                }),
            );
        }
    }
}

/// Reads the detection log, validating every record.
pub fn read_detections(
    path: &Path,
) -> Result<impl Iterator<Item = Result<FrameRecord, LogError>>, LogError> {
    let owned = path.to_owned();
    Ok(JsonLines::<FrameRecord>::open(path)?
        .enumerate()
        .map(move |(k, r)| {
            let r = r?;
            r.check().map_err(|message| LogError::Schema {
                path: owned.clone(),
                line: k + 1,
                message,
            })?;
            Ok(r)
        }))
}

pub fn read_truth(path: &Path) -> Result<JsonLines<TruthRecord>, LogError> {
    JsonLines::open(path)
}

/// Joins the two streams of a log directory back into simulator frames.
pub fn read_sim_frames(
    dir: &Path,
) -> Result<impl Iterator<Item = Result<SimFrame, LogError>>, LogError> {
    let dets = read_detections(&dir.join(DETECTIONS_FILE))?;
    let truth = read_truth(&dir.join(TRUTH_FILE))?;
    let mut truth = truth.fuse();
    let mut dets = dets.fuse();
    let mut frame = 0usize;
    let mut failed = false;
    Ok(std::iter::from_fn(move || {
        if failed {
            return None;
        }
        let k = frame;
        frame += 1;
        let out = match (dets.next(), truth.next()) {
            (None, None) => return None,
            (Some(d), Some(t)) => join(k, d, t),
            (Some(_), None) | (None, Some(_)) => Err(LogError::Mismatch {
                frame: k,
                message: "logs have different lengths".into(),
            }),
        };
        failed = out.is_err();
        Some(out)
    }))
}

fn join(
    frame: usize,
    d: Result<FrameRecord, LogError>,
    t: Result<TruthRecord, LogError>,
) -> Result<SimFrame, LogError> {
    let (d, t) = (d?, t?);
    if d.t != t.t {
        return Err(LogError::Mismatch {
            frame,
            message: format!("timestamps {} and {}", d.t, t.t),
        });
    }
    if d.detections.len() != t.sources.len() {
        return Err(LogError::Mismatch {
            frame,
            message: format!(
                "{} detections but {} sources",
                d.detections.len(),
                t.sources.len()
            ),
        });
    }
    Ok(SimFrame {
        detections: d.to_detections(),
        truth: GroundTruthFrame::from(&t),
    })
}
