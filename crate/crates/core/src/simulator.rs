//! Seeded synthetic world with a static robot at the origin facing `+x`.
//!
//! Agents are humans (walking, standing, sitting) and clutter, either
//! static or moving along waypoint loops. Each frame is sensed by an
//! upper-body camera detector, a 2D-LiDAR leg detector and a 3D LiDAR whose
//! scan is segmented into class-agnostic cluster proposals.
//!
//! All randomness comes from one generator seeded by the scenario and drawn
//! in a fixed order, so a scenario determines every emitted frame.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{segment, ClusteringParams, MIN_EXTENT};
use crate::evaluation::Box3;
use crate::model::{Cluster, Detection, DetectorId, Point, PointCloud3D, Timestamp};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("cannot parse scenario")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read scenario {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Walker,
    Stander,
    Sitter,
    Clutter,
}

impl AgentKind {
    pub fn is_human(self) -> bool {
        self != AgentKind::Clutter
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Walker => "walker",
            AgentKind::Stander => "stander",
            AgentKind::Sitter => "sitter",
            AgentKind::Clutter => "clutter",
        }
    }
}

/// One scripted agent. Moving agents loop through `waypoints` at `speed`;
/// stationary ones stay at the first waypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub kind: AgentKind,
    pub waypoints: Vec<[f64; 2]>,
    #[serde(default)]
    pub speed: f64,
    /// Body box `(w, d, h)` in meters.
    pub dims: [f64; 3],
    /// Intensity modes of a human, or the uniform intensity band of clutter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflectance: Option<[f64; 2]>,
}

impl AgentSpec {
    pub fn reflectance(&self) -> [f64; 2] {
        self.reflectance.unwrap_or(if self.kind.is_human() {
            HUMAN_REFLECTANCE
        } else {
            CLUTTER_REFLECTANCE
        })
    }

    pub fn is_moving(&self) -> bool {
        self.speed > 0.0 && self.waypoints.len() >= 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ConfidenceModel {
    /// `clamp(high - slope * range, low, high)`.
    Range {
        high: f64,
        slope: f64,
        low: f64,
    },
    Constant {
        value: f64,
    },
    /// Placeholder confidence, replaced downstream by the classifier.
    Classifier,
}

impl ConfidenceModel {
    pub fn confidence(&self, range: f64) -> f64 {
        match *self {
            ConfidenceModel::Range { high, slope, low } => (high - slope * range).clamp(low, high),
            ConfidenceModel::Constant { value } => value,
            ConfidenceModel::Classifier => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub fov_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub detect_prob: f64,
    /// Expected false detections per frame.
    pub false_pos_rate: f64,
    /// Position noise standard deviation in meters.
    pub noise_std: f64,
    pub confidence: ConfidenceModel,
    /// Agent kinds this detector responds to.
    pub sees: Vec<AgentKind>,
}

impl SensorConfig {
    pub fn covers(&self, p: [f64; 2]) -> bool {
        let r = p[0].hypot(p[1]);
        let bearing = p[1].atan2(p[0]).to_degrees().abs();
        r >= self.min_range
            && r <= self.max_range
            && (self.fov_deg >= 360.0 || bearing <= self.fov_deg / 2.0)
    }

    fn validate(&self, name: &str) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidScenario(format!("{name}: {m}")));
        if !(self.fov_deg > 0.0 && self.fov_deg <= 360.0) {
            return bad("fov_deg must be in (0, 360]");
        }
        if !(self.min_range >= 0.0 && self.max_range > self.min_range) {
            return bad("ranges must satisfy 0 <= min_range < max_range");
        }
        if !(0.0..=1.0).contains(&self.detect_prob) {
            return bad("detect_prob must be in [0, 1]");
        }
        if !(self.false_pos_rate >= 0.0 && self.noise_std >= 0.0) {
            return bad("false_pos_rate and noise_std must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorSuite {
    pub upper_body: SensorConfig,
    pub leg: SensorConfig,
    pub cluster3d: SensorConfig,
}

impl Default for SensorSuite {
    fn default() -> Self {
        use AgentKind::*;
        Self {
            upper_body: SensorConfig {
                fov_deg: 58.0,
                min_range: 0.5,
                max_range: 5.0,
                detect_prob: 0.9,
                false_pos_rate: 0.02,
                noise_std: 0.08,
                confidence: ConfidenceModel::Range {
                    high: 0.95,
                    slope: 0.08,
                    low: 0.55,
                },
                sees: vec![Walker, Stander, Sitter],
            },
            leg: SensorConfig {
                fov_deg: 270.0,
                min_range: 0.1,
                max_range: 15.0,
                detect_prob: 0.85,
                false_pos_rate: 0.3,
                noise_std: 0.05,
                confidence: ConfidenceModel::Constant { value: 0.6 },
                sees: vec![Walker, Stander],
            },
            cluster3d: SensorConfig {
                fov_deg: 360.0,
                min_range: 0.5,
                max_range: 20.0,
                detect_prob: 1.0,
                false_pos_rate: 0.2,
                noise_std: 0.0,
                confidence: ConfidenceModel::Classifier,
                sees: vec![Walker, Stander, Sitter, Clutter],
            },
        }
    }
}

impl SensorSuite {
    pub fn get(&self, id: DetectorId) -> Option<&SensorConfig> {
        match id {
            DetectorId::UpperBody => Some(&self.upper_body),
            DetectorId::Leg => Some(&self.leg),
            DetectorId::Cluster3D => Some(&self.cluster3d),
            DetectorId::TrajectoryPrior => None,
        }
    }
}

/// 3D LiDAR return model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    /// Points on a reference human at 1 m; counts fall off with range squared.
    pub density: f64,
    pub min_points: usize,
    pub max_points: usize,
    /// Standard deviation of the extreme points around the true box, meters.
    pub extent_noise: f64,
    /// Point jitter around the sampled body surface, meters.
    pub surface_noise: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            density: 2500.0,
            min_points: 12,
            max_points: 400,
            extent_noise: 0.015,
            surface_noise: 0.01,
        }
    }
}

/// Random population added on top of the scripted agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub walkers: usize,
    pub standers: usize,
    pub sitters: usize,
    /// Sitters placed in front of the robot within camera range.
    pub near_sitters: usize,
    pub clutter: usize,
    /// Moving human-sized clutter such as carts.
    pub dynamic_clutter: usize,
    /// Fraction of static clutter with human-like volume.
    pub hard_negative_fraction: f64,
    pub inner_radius: f64,
    pub outer_radius: f64,
    /// Minimum gap between walker routes and other objects, meters.
    pub clearance: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            walkers: 6,
            standers: 3,
            sitters: 8,
            near_sitters: 3,
            clutter: 14,
            dynamic_clutter: 2,
            hard_negative_fraction: 0.3,
            inner_radius: 1.5,
            outer_radius: 18.0,
            clearance: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub duration: f64,
    pub frame_rate: f64,
    pub seed: u64,
    /// Static detections always report 0.5.
    pub literal_confidence: bool,
    pub agents: Vec<AgentSpec>,
    pub population: Option<PopulationConfig>,
    pub sensors: SensorSuite,
    pub lidar: LidarConfig,
    pub clustering: ClusteringParams<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            duration: 60.0,
            frame_rate: 10.0,
            seed: 0,
            literal_confidence: false,
            agents: Vec::new(),
            population: None,
            sensors: SensorSuite::default(),
            lidar: LidarConfig::default(),
            clustering: ClusteringParams::default(),
        }
    }
}

impl ScenarioConfig {
    /// Ten minutes of a mixed atrium-like scene.
    pub fn reference(seed: u64) -> Self {
        Self {
            duration: 600.0,
            seed,
            population: Some(PopulationConfig::default()),
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.frame_rate + 1e-9).floor() as usize
    }

    /// Same noise-free sensors: perfect detection, no position noise and
    /// no false positives.
    pub fn noiseless(mut self) -> Self {
        for s in [
            &mut self.sensors.upper_body,
            &mut self.sensors.leg,
            &mut self.sensors.cluster3d,
        ] {
            s.detect_prob = 1.0;
            s.noise_std = 0.0;
            s.false_pos_rate = 0.0;
        }
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if !(self.duration > 0.0) {
            return bad("duration must be positive".into());
        }
        if !(self.frame_rate > 0.0) {
            return bad("frame_rate must be positive".into());
        }
        self.sensors.upper_body.validate("sensors.upper_body")?;
        self.sensors.leg.validate("sensors.leg")?;
        self.sensors.cluster3d.validate("sensors.cluster3d")?;
        if !self.clustering.is_valid() {
            return bad("clustering parameters are invalid".into());
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.waypoints.is_empty() {
                return bad(format!("agent {i} has no waypoints"));
            }
            if a.dims.iter().any(|&v| !(v > 0.0)) {
                return bad(format!("agent {i} dims must be positive"));
            }
            if a.speed < 0.0 {
                return bad(format!("agent {i} speed must be non-negative"));
            }
        }
        if let Some(p) = &self.population {
            if !(0.0..=1.0).contains(&p.hard_negative_fraction)
                || !(p.outer_radius > p.inner_radius)
                || p.near_sitters > p.sitters
            {
                return bad("population parameters are invalid".into());
            }
        }
        Ok(())
    }
}

/// True pose of one agent at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: usize,
    pub kind: AgentKind,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub dims: [f64; 3],
    pub reflectance: [f64; 2],
}

impl AgentState {
    pub fn range(&self) -> f64 {
        self.position[0].hypot(self.position[1])
    }

    pub fn bbox(&self) -> Box3<f64> {
        Box3::centered(self.position[0], self.position[1], 0.0, self.dims)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub stamp: Timestamp,
    pub agents: Vec<AgentState>,
    /// Generating agent of each emitted detection, `None` for false positives.
    pub sources: Vec<Option<usize>>,
}

impl GroundTruthFrame {
    pub fn agent(&self, id: usize) -> Option<&AgentState> {
        self.agents.iter().find(|a| a.id == id)
    }

    /// Whether detection `k` was generated by a human.
    pub fn is_human_source(&self, k: usize) -> bool {
        self.sources
            .get(k)
            .copied()
            .flatten()
            .and_then(|id| self.agent(id))
            .is_some_and(|a| a.kind.is_human())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub detections: Vec<Detection<f64>>,
    pub truth: GroundTruthFrame,
}

#[derive(Debug, Clone)]
struct Route {
    points: Vec<[f64; 2]>,
    /// Cumulative length at each waypoint, closing back to the first.
    cumulative: Vec<f64>,
}

impl Route {
    fn new(points: Vec<[f64; 2]>) -> Self {
        let mut cumulative = vec![0.0];
        for k in 0..points.len() {
            let (a, b) = (points[k], points[(k + 1) % points.len()]);
            cumulative.push(cumulative[k] + (b[0] - a[0]).hypot(b[1] - a[1]));
        }
        Self { points, cumulative }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Position and unit heading after traveling `s` meters.
    fn at(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let total = self.length();
        if total <= 0.0 {
            return (self.points[0], [0.0, 0.0]);
        }
        let s = s.rem_euclid(total);
        let k = self
            .cumulative
            .partition_point(|&c| c <= s)
            .saturating_sub(1)
            .min(self.points.len() - 1);
        let (a, b) = (self.points[k], self.points[(k + 1) % self.points.len()]);
        let len = self.cumulative[k + 1] - self.cumulative[k];
        if len <= 0.0 {
            return (a, [0.0, 0.0]);
        }
        let f = (s - self.cumulative[k]) / len;
        let dir = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        ([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])], dir)
    }
}

/// The scripted and generated agents of a scenario.
#[derive(Debug, Clone)]
pub struct World {
    agents: Vec<(AgentSpec, Route)>,
}

impl World {
    pub fn build(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut specs = config.agents.clone();
        if let Some(p) = &config.population {
            specs.extend(generate_population(p, &specs, rng));
        }
        Self {
            agents: specs
                .into_iter()
                .map(|s| {
                    let r = Route::new(s.waypoints.clone());
                    (s, r)
                })
                .collect(),
        }
    }

    pub fn specs(&self) -> impl Iterator<Item = &AgentSpec> {
        self.agents.iter().map(|a| &a.0)
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }
}

/// Poses of every agent at time `t`.
pub fn step_world(world: &World, t: f64) -> GroundTruthFrame {
    let agents = world
        .agents
        .iter()
        .enumerate()
        .map(|(id, (spec, route))| {
            let (position, velocity) = if spec.is_moving() {
                let (p, dir) = route.at(spec.speed * t);
                (p, [dir[0] * spec.speed, dir[1] * spec.speed])
            } else {
                (spec.waypoints[0], [0.0, 0.0])
            };
            AgentState {
                id,
                kind: spec.kind,
                position,
                velocity,
                dims: spec.dims,
                reflectance: spec.reflectance(),
            }
        })
        .collect();
    GroundTruthFrame {
        stamp: Timestamp(t),
        agents,
        sources: Vec::new(),
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * ab[0]).hypot(p[1] - a[1] - t * ab[1])
}

fn segments_distance(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> f64 {
    let cross = |o: [f64; 2], p: [f64; 2], q: [f64; 2]| {
        (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])
    };
    let (d1, d2, d3, d4) = (
        cross(c, d, a),
        cross(c, d, b),
        cross(a, b, c),
        cross(a, b, d),
    );
    if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

/// Closed polyline of a route, or the single point of a stationary agent.
fn footprint_segments(spec: &AgentSpec) -> Vec<([f64; 2], [f64; 2])> {
    let w = &spec.waypoints;
    if !spec.is_moving() {
        return vec![(w[0], w[0])];
    }
    (0..w.len()).map(|k| (w[k], w[(k + 1) % w.len()])).collect()
}

fn gap(a: &AgentSpec, b: &AgentSpec) -> f64 {
    let reach = |s: &AgentSpec| 0.5 * s.dims[0].hypot(s.dims[1]);
    let mut best = f64::INFINITY;
    for (p, q) in footprint_segments(a) {
        for (r, s) in footprint_segments(b) {
            best = best.min(segments_distance(p, q, r, s));
        }
    }
    best - reach(a) - reach(b)
}

fn polar(rng: &mut ChaCha8Rng, r0: f64, r1: f64, half_fov_deg: f64) -> [f64; 2] {
    // Area-uniform radius.
    let r = (rng.random_range(r0 * r0..r1 * r1)).sqrt();
    let a = rng.random_range(-half_fov_deg..half_fov_deg).to_radians();
    [r * a.cos(), r * a.sin()]
}

fn human_dims(rng: &mut ChaCha8Rng, kind: AgentKind) -> [f64; 3] {
    match kind {
        AgentKind::Sitter => [
            rng.random_range(0.45..0.6),
            rng.random_range(0.55..0.75),
            rng.random_range(1.15..1.35),
        ],
        _ => [
            rng.random_range(0.45..0.62),
            rng.random_range(0.3..0.45),
            rng.random_range(1.55..1.9),
        ],
    }
}

fn clutter_dims(rng: &mut ChaCha8Rng, hard: bool) -> [f64; 3] {
    if hard {
        // Bins, crates and boards within the human-like volume.
        return match rng.random_range(0..3) {
            0 => [
                rng.random_range(0.35..0.5),
                rng.random_range(0.35..0.5),
                rng.random_range(0.45..1.0),
            ],
            1 => [
                rng.random_range(0.5..0.9),
                rng.random_range(0.4..0.8),
                rng.random_range(0.3..0.8),
            ],
            _ => [
                rng.random_range(0.6..0.95),
                rng.random_range(0.2..0.3),
                rng.random_range(1.0..1.9),
            ],
        };
    }
    match rng.random_range(0..4) {
        // Pillar.
        0 => [
            rng.random_range(0.3..0.6),
            rng.random_range(0.3..0.6),
            rng.random_range(2.4..3.5),
        ],
        // Table.
        1 => [
            rng.random_range(1.2..2.0),
            rng.random_range(0.7..1.1),
            rng.random_range(0.7..0.8),
        ],
        // Small box.
        2 => [
            rng.random_range(0.1..0.18),
            rng.random_range(0.1..0.18),
            rng.random_range(0.12..0.19),
        ],
        // Bench.
        _ => [
            rng.random_range(1.5..2.5),
            rng.random_range(0.35..0.5),
            rng.random_range(0.4..0.5),
        ],
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

fn generate_population(
    p: &PopulationConfig,
    scripted: &[AgentSpec],
    rng: &mut ChaCha8Rng,
) -> Vec<AgentSpec> {
    let (r0, r1) = (p.inner_radius, p.outer_radius);
    let mut out: Vec<AgentSpec> = Vec::new();
    // Objects that must keep clear of everything else; walkers may cross each other.
    let place = |out: &mut Vec<AgentSpec>,
                 rng: &mut ChaCha8Rng,
                 draw: &mut dyn FnMut(&mut ChaCha8Rng) -> AgentSpec| {
        let mut candidate = draw(rng);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let clear = scripted.iter().chain(out.iter()).all(|o| {
                (o.kind == AgentKind::Walker && candidate.kind == AgentKind::Walker)
                    || gap(o, &candidate) >= p.clearance
            });
            if clear {
                break;
            }
            candidate = draw(rng);
        }
        out.push(candidate);
    };
    for k in 0..p.sitters {
        let near = k < p.near_sitters;
        place(&mut out, rng, &mut |rng| AgentSpec {
            kind: AgentKind::Sitter,
            waypoints: vec![if near {
                polar(rng, 1.5, 4.5, 25.0)
            } else {
                polar(rng, r0, r1, 180.0)
            }],
            speed: 0.0,
            dims: human_dims(rng, AgentKind::Sitter),
            reflectance: Some(human_reflectance(rng)),
        });
    }
    for _ in 0..p.standers {
        place(&mut out, rng, &mut |rng| AgentSpec {
            kind: AgentKind::Stander,
            waypoints: vec![polar(rng, r0, r1 * 0.8, 180.0)],
            speed: 0.0,
            dims: human_dims(rng, AgentKind::Stander),
            reflectance: Some(human_reflectance(rng)),
        });
    }
    for k in 0..p.clutter {
        let hard = (k as f64) < p.hard_negative_fraction * p.clutter as f64;
        place(&mut out, rng, &mut |rng| AgentSpec {
            kind: AgentKind::Clutter,
            waypoints: vec![polar(rng, r0, r1, 180.0)],
            speed: 0.0,
            dims: clutter_dims(rng, hard),
            reflectance: Some(clutter_reflectance(rng)),
        });
    }
    for _ in 0..p.dynamic_clutter {
        place(&mut out, rng, &mut |rng| AgentSpec {
            kind: AgentKind::Clutter,
            waypoints: (0..3).map(|_| polar(rng, r0 + 2.0, r1, 180.0)).collect(),
            speed: rng.random_range(0.5..1.2),
            dims: [
                rng.random_range(0.6..0.9),
                rng.random_range(0.45..0.6),
                rng.random_range(0.9..1.1),
            ],
            reflectance: Some(clutter_reflectance(rng)),
        });
    }
    for _ in 0..p.walkers {
        place(&mut out, rng, &mut |rng| AgentSpec {
            kind: AgentKind::Walker,
            waypoints: (0..4)
                .map(|_| polar(rng, r0 + 0.5, r1 * 0.85, 180.0))
                .collect(),
            speed: rng.random_range(0.6..1.5),
            dims: human_dims(rng, AgentKind::Walker),
            reflectance: Some(human_reflectance(rng)),
        });
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).expect("positive std").sample(rng)
    } else {
        0.0
    }
}

/// Default clothing and skin intensity modes.
pub const HUMAN_REFLECTANCE: [f64; 2] = [0.25, 0.68];
/// Default intensity band of clutter.
pub const CLUTTER_REFLECTANCE: [f64; 2] = [0.0, 1.0];

const MODE_STD: f64 = 0.06;

fn human_reflectance(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.random_range(0.12..0.42), rng.random_range(0.55..0.85)]
}

fn clutter_reflectance(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let c: f64 = rng.random_range(0.15..0.85);
    let half = rng.random_range(0.08..0.3);
    [(c - half).max(0.0), (c + half).min(1.0)]
}

/// One return: humans scatter around two modes `a` and `b`, clutter is
/// uniform on `[a, b]`.
fn intensity(rng: &mut ChaCha8Rng, human: bool, [a, b]: [f64; 2]) -> f64 {
    if !human {
        return rng.random_range(a..=b);
    }
    let mu = if rng.random_bool(0.5) { a } else { b };
    (mu + gaussian(rng, MODE_STD)).clamp(0.0, 1.0)
}

fn point_budget(state: &AgentState, lidar: &LidarConfig) -> usize {
    let r = state.range().max(0.5);
    let size = (state.dims[2] * state.dims[0].max(state.dims[1])) / (1.7 * 0.5);
    let n = lidar.density * size.min(3.0) / (r * r);
    (n.round() as usize).clamp(lidar.min_points, lidar.max_points)
}

fn ellipse_point(rng: &mut ChaCha8Rng, cx: f64, cy: f64, a: f64, b: f64) -> (f64, f64) {
    let th = rng.random_range(0.0..std::f64::consts::TAU);
    (cx + a * th.cos(), cy + b * th.sin())
}

/// Body-local `(x, y, z)` offsets of a human surface sample.
fn human_offset(rng: &mut ChaCha8Rng, kind: AgentKind, [w, d, h]: [f64; 3]) -> [f64; 3] {
    let u: f64 = rng.random();
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    if kind == AgentKind::Sitter {
        if u < 0.2 {
            // Shins.
            let (x, y) = ellipse_point(rng, side * w / 4.0, d / 2.0 - 0.08, 0.06, 0.06);
            [x, y, rng.random_range(0.0..0.45)]
        } else if u < 0.4 {
            // Thighs.
            let (x, z) = ellipse_point(rng, side * w / 4.0, 0.5, 0.08, 0.07);
            [x, rng.random_range(-d / 2.0 + 0.1..d / 2.0), z]
        } else if u < 0.85 {
            let (x, y) = ellipse_point(rng, 0.0, -d / 4.0, w / 2.0, d / 4.0);
            [x, y, rng.random_range(0.55..0.82 * h)]
        } else {
            let (x, y) = ellipse_point(rng, 0.0, -d / 4.0, w / 5.0, d / 6.0);
            [x, y, rng.random_range(0.82 * h..h)]
        }
    } else if u < 0.35 {
        let (x, y) = ellipse_point(rng, side * w / 4.0, 0.0, 0.07, 0.07);
        [x, y, rng.random_range(0.0..0.47 * h)]
    } else if u < 0.82 {
        let (a, b) = (
            w / 2.0 * rng.random_range(0.85..1.0),
            d / 2.0 * rng.random_range(0.85..1.0),
        );
        let (x, y) = ellipse_point(rng, 0.0, 0.0, a, b);
        [x, y, rng.random_range(0.47 * h..0.82 * h)]
    } else {
        let (x, y) = ellipse_point(rng, 0.0, 0.0, w / 5.0, d / 4.0);
        [x, y, rng.random_range(0.82 * h..h)]
    }
}

/// Body-local offset of a sample on the five visible faces of a box.
fn box_offset(rng: &mut ChaCha8Rng, [w, d, h]: [f64; 3]) -> [f64; 3] {
    let areas = [w * h, w * h, d * h, d * h, w * d];
    let total: f64 = areas.iter().sum();
    let mut u = rng.random_range(0.0..total);
    let mut face = 4;
    for (k, a) in areas.iter().enumerate() {
        if u < *a {
            face = k;
            break;
        }
        u -= a;
    }
    let (x, y, z) = (
        rng.random_range(-w / 2.0..w / 2.0),
        rng.random_range(-d / 2.0..d / 2.0),
        rng.random_range(0.0..h),
    );
    match face {
        0 => [x, -d / 2.0, z],
        1 => [x, d / 2.0, z],
        2 => [-w / 2.0, y, z],
        3 => [w / 2.0, y, z],
        _ => [x, y, h],
    }
}

/// Synthetic LiDAR returns of one agent.
///
/// Point count falls with range squared. Extreme points pin the cluster
/// bounds to the body box up to `extent_noise`. Intensities scatter around
/// two modes for humans and uniformly for clutter.
pub fn synthesize_points(
    state: &AgentState,
    lidar: &LidarConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Point<f64>> {
    let n = point_budget(state, lidar);
    let [w, d, h] = state.dims;
    let human = state.kind.is_human();
    let mut local = Vec::with_capacity(n + 6);
    let mid = if state.kind == AgentKind::Sitter {
        0.7 * h
    } else {
        0.65 * h
    };
    let y_off = if state.kind == AgentKind::Sitter {
        -d / 4.0
    } else {
        0.0
    };
    if human {
        local.push([-w / 2.0, y_off, mid]);
        local.push([w / 2.0, y_off, mid]);
        local.push([0.0, -d / 2.0, mid]);
        local.push([0.0, d / 2.0, mid]);
        local.push([0.0, y_off, h]);
        local.push([0.0, 0.0, 0.0]);
    } else {
        local.push([-w / 2.0, -d / 2.0, 0.0]);
        local.push([w / 2.0, d / 2.0, h]);
    }
    let pinned = local.len();
    while local.len() < n.max(pinned) {
        local.push(if human {
            human_offset(rng, state.kind, state.dims)
        } else {
            box_offset(rng, state.dims)
        });
    }
    local
        .into_iter()
        .enumerate()
        .map(|(k, o)| {
            let sd = if k < pinned {
                lidar.extent_noise
            } else {
                lidar.surface_noise
            };
            let x = state.position[0] + o[0] + gaussian(rng, sd);
            let y = state.position[1] + o[1] + gaussian(rng, sd);
            let z = (o[2] + gaussian(rng, sd)).max(0.0);
            let i = intensity(rng, state.kind.is_human(), state.reflectance);
            quantized(x, y, z, i)
        })
        .collect()
}

/// Returns per metre and per unit intensity kept by the scanner.
const RESOLUTION: f64 = 1000.0;

/// A return at the scanner's millimetre range and 1e-3 intensity resolution.
fn quantized(x: f64, y: f64, z: f64, i: f64) -> Point<f64> {
    let q = |v: f64| (v * RESOLUTION).round() / RESOLUTION;
    Point::new(q(x), q(y), q(z), q(i))
}

/// [`synthesize_points`] packaged as a cluster, without segmentation.
pub fn synthesize_cluster(
    state: &AgentState,
    lidar: &LidarConfig,
    rng: &mut ChaCha8Rng,
) -> Cluster<f64> {
    Cluster::from_points(synthesize_points(state, lidar, rng), MIN_EXTENT)
        .expect("synthesized points are valid")
}

/// Small spurious return blob.
fn spurious_points(config: &SensorConfig, rng: &mut ChaCha8Rng) -> Vec<Point<f64>> {
    let c = polar(
        rng,
        config.min_range.max(1.0),
        config.max_range,
        config.fov_deg.min(360.0) / 2.0,
    );
    let n = rng.random_range(6..14);
    (0..n)
        .map(|_| {
            quantized(
                c[0] + rng.random_range(-0.08..0.08),
                c[1] + rng.random_range(-0.08..0.08),
                rng.random_range(0.15..0.35),
                rng.random(),
            )
        })
        .collect()
}

fn key(p: &Point<f64>) -> [u64; 3] {
    [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]
}

/// Detections of all sensors for one ground-truth frame, with the
/// generating agent of each.
pub fn sense(
    frame: &GroundTruthFrame,
    config: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<Detection<f64>>, Vec<Option<usize>>) {
    let stamp = frame.stamp;
    let mut detections = Vec::new();
    let mut sources = Vec::new();
    for id in [DetectorId::UpperBody, DetectorId::Leg] {
        let sc = config.sensors.get(id).expect("static sensor");
        let conf = |r: f64| {
            if config.literal_confidence {
                0.5
            } else {
                sc.confidence.confidence(r)
            }
        };
        for a in &frame.agents {
            if !sc.sees.contains(&a.kind) || !sc.covers(a.position) {
                continue;
            }
            if !rng.random_bool(sc.detect_prob) {
                continue;
            }
            let pos = [
                a.position[0] + gaussian(rng, sc.noise_std),
                a.position[1] + gaussian(rng, sc.noise_std),
            ];
            detections.push(Detection::point(stamp, id, pos, conf(a.range())));
            sources.push(Some(a.id));
        }
        for _ in 0..poisson(rng, sc.false_pos_rate) {
            let pos = polar(
                rng,
                sc.min_range.max(0.3),
                sc.max_range,
                sc.fov_deg.min(360.0) / 2.0,
            );
            detections.push(Detection::point(stamp, id, pos, conf(pos[0].hypot(pos[1]))));
            sources.push(None);
        }
    }

    let sc = &config.sensors.cluster3d;
    let mut scan = Vec::new();
    let mut origin: HashMap<[u64; 3], usize> = HashMap::new();
    for a in &frame.agents {
        if !sc.sees.contains(&a.kind) || !sc.covers(a.position) || !rng.random_bool(sc.detect_prob)
        {
            continue;
        }
        for p in synthesize_points(a, &config.lidar, rng) {
            origin.insert(key(&p), a.id);
            scan.push(p);
        }
    }
    for _ in 0..poisson(rng, sc.false_pos_rate) {
        scan.extend(spurious_points(sc, rng));
    }
    for cluster in segment(&PointCloud3D::new(scan), &config.clustering) {
        let mut votes: HashMap<Option<usize>, usize> = HashMap::new();
        for p in &cluster.points.points {
            *votes.entry(origin.get(&key(p)).copied()).or_default() += 1;
        }
        // Majority origin, ties to the lowest id with false-positive points last.
        let source = votes
            .into_iter()
            .max_by(|a, b| {
                a.1.cmp(&b.1).then_with(|| {
                    b.0.map_or(usize::MAX, |v| v)
                        .cmp(&a.0.map_or(usize::MAX, |v| v))
                })
            })
            .and_then(|(s, _)| s);
        let conf = sc.confidence.confidence(0.0);
        detections.push(Detection::with_cluster(stamp, cluster, conf));
        sources.push(source);
    }
    (detections, sources)
}

fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> u64 {
    if rate > 0.0 {
        Poisson::new(rate).expect("positive rate").sample(rng) as u64
    } else {
        0
    }
}

/// Frame-by-frame simulation of a scenario.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: ScenarioConfig,
    world: World,
    rng: ChaCha8Rng,
    next_frame: usize,
}

impl Simulator {
    pub fn new(config: ScenarioConfig) -> Result<Self, SimError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let world = World::build(&config, &mut rng);
        Ok(Self {
            config,
            world,
            rng,
            next_frame: 0,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn frame_count(&self) -> usize {
        self.config.frame_count()
    }
}

impl Iterator for Simulator {
    type Item = SimFrame;

    fn next(&mut self) -> Option<SimFrame> {
        if self.next_frame >= self.config.frame_count() {
            return None;
        }
        let t = self.next_frame as f64 / self.config.frame_rate;
        self.next_frame += 1;
        let mut truth = step_world(&self.world, t);
        let (detections, sources) = sense(&truth, &self.config, &mut self.rng);
        truth.sources = sources;
        Some(SimFrame { detections, truth })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.config.frame_count() - self.next_frame;
        (left, Some(left))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{is_volume_negative, VolumeBounds};
    use crate::model::Dims;

    fn scripted(agents: Vec<AgentSpec>) -> ScenarioConfig {
        ScenarioConfig {
            agents,
            ..ScenarioConfig::default()
        }
    }

    fn standing(kind: AgentKind, x: f64, y: f64, dims: [f64; 3]) -> AgentSpec {
        AgentSpec {
            kind,
            waypoints: vec![[x, y]],
            speed: 0.0,
            dims,
            reflectance: None,
        }
    }

    fn state(kind: AgentKind, x: f64, dims: [f64; 3]) -> AgentState {
        AgentState {
            id: 0,
            kind,
            position: [x, 0.0],
            velocity: [0.0; 2],
            dims,
            reflectance: AgentSpec {
                kind,
                waypoints: vec![],
                speed: 0.0,
                dims,
                reflectance: None,
            }
            .reflectance(),
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn walker_advances_along_its_route() {
        let walker = AgentSpec {
            kind: AgentKind::Walker,
            waypoints: vec![[0.0, 1.0], [10.0, 1.0]],
            speed: 1.0,
            dims: [0.5, 0.4, 1.7],
            reflectance: None,
        };
        let world = World::build(&scripted(vec![walker]), &mut rng());
        let f = step_world(&world, 2.0);
        assert!((f.agents[0].position[0] - 2.0).abs() < 1e-12);
        assert_eq!(f.agents[0].velocity, [1.0, 0.0]);
        // Back along the return leg after 12 m.
        assert!((step_world(&world, 12.0).agents[0].position[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_agents_keep_their_pose() {
        let world = World::build(
            &scripted(vec![standing(
                AgentKind::Stander,
                3.0,
                1.0,
                [0.5, 0.4, 1.7],
            )]),
            &mut rng(),
        );
        for t in [0.0, 7.3, 59.9] {
            assert_eq!(step_world(&world, t).agents[0].position, [3.0, 1.0]);
        }
    }

    #[test]
    fn sixty_seconds_at_ten_hertz_is_six_hundred_frames() {
        let sim = Simulator::new(scripted(vec![])).unwrap();
        assert_eq!(sim.count(), 600);
    }

    #[test]
    fn same_seed_gives_identical_streams() {
        let cfg = ScenarioConfig {
            duration: 5.0,
            ..ScenarioConfig::reference(4)
        };
        let a: Vec<_> = Simulator::new(cfg.clone()).unwrap().collect();
        let b: Vec<_> = Simulator::new(cfg).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn far_humans_are_invisible_to_the_camera() {
        let mut cfg = scripted(vec![standing(
            AgentKind::Stander,
            10.0,
            0.0,
            [0.5, 0.4, 1.7],
        )])
        .noiseless();
        cfg.literal_confidence = false;
        let truth = step_world(&World::build(&cfg, &mut rng()), 0.0);
        let (dets, _) = sense(&truth, &cfg, &mut rng());
        assert!(dets.iter().all(|d| d.detector != DetectorId::UpperBody));
        assert!(dets.iter().any(|d| d.detector == DetectorId::Leg));
    }

    #[test]
    fn static_detector_confidences() {
        let cfg = scripted(vec![standing(
            AgentKind::Stander,
            2.0,
            0.0,
            [0.5, 0.4, 1.7],
        )])
        .noiseless();
        let truth = step_world(&World::build(&cfg, &mut rng()), 0.0);
        let (dets, _) = sense(&truth, &cfg, &mut rng());
        let conf = |id| dets.iter().find(|d| d.detector == id).unwrap().confidence;
        assert!((conf(DetectorId::UpperBody) - 0.79).abs() < 1e-12);
        assert_eq!(conf(DetectorId::Leg), 0.6);

        let literal = ScenarioConfig {
            literal_confidence: true,
            ..cfg
        };
        let (dets, _) = sense(&truth, &literal, &mut rng());
        assert!(dets
            .iter()
            .filter(|d| d.detector != DetectorId::Cluster3D)
            .all(|d| d.confidence == 0.5));
    }

    #[test]
    fn sitters_are_missed_by_the_leg_detector() {
        let cfg = scripted(vec![standing(
            AgentKind::Sitter,
            3.0,
            0.0,
            [0.5, 0.6, 1.25],
        )])
        .noiseless();
        let truth = step_world(&World::build(&cfg, &mut rng()), 0.0);
        let (dets, _) = sense(&truth, &cfg, &mut rng());
        let ids: Vec<_> = dets.iter().map(|d| d.detector).collect();
        assert_eq!(ids, vec![DetectorId::UpperBody, DetectorId::Cluster3D]);
    }

    #[test]
    fn human_cluster_bounds_track_body_dims() {
        let dims = [0.5, 0.4, 1.7];
        for x in [2.0, 6.0, 15.0] {
            let c = synthesize_cluster(
                &state(AgentKind::Walker, x, dims),
                &LidarConfig::default(),
                &mut rng(),
            );
            let b = [c.bounds.w, c.bounds.d, c.bounds.h];
            for k in 0..3 {
                assert!((b[k] - dims[k]).abs() <= 0.05, "range {x}: {b:?}");
            }
        }
    }

    #[test]
    fn density_falls_with_range() {
        let lidar = LidarConfig::default();
        let near = synthesize_points(
            &state(AgentKind::Walker, 4.0, [0.5, 0.4, 1.7]),
            &lidar,
            &mut rng(),
        )
        .len();
        let far = synthesize_points(
            &state(AgentKind::Walker, 16.0, [0.5, 0.4, 1.7]),
            &lidar,
            &mut rng(),
        )
        .len();
        assert!(near > far, "{near} vs {far}");
    }

    #[test]
    fn trash_bin_passes_the_volume_filter() {
        let c = synthesize_cluster(
            &state(AgentKind::Clutter, 5.0, [0.4, 0.4, 0.5]),
            &LidarConfig::default(),
            &mut rng(),
        );
        assert!(!is_volume_negative(&c.bounds, &VolumeBounds::default()));
        assert!(!is_volume_negative(
            &Dims::new(0.4, 0.4, 0.5),
            &VolumeBounds::default()
        ));
    }

    #[test]
    fn every_cluster_resolves_to_its_agent() {
        let cfg = scripted(vec![
            standing(AgentKind::Stander, 4.0, 0.0, [0.5, 0.4, 1.7]),
            standing(AgentKind::Clutter, -3.0, 5.0, [1.5, 0.8, 0.75]),
        ])
        .noiseless();
        let mut sim = Simulator::new(cfg).unwrap();
        let f = sim.next().unwrap();
        let clusters: Vec<_> = (0..f.detections.len())
            .filter(|&k| f.detections[k].detector == DetectorId::Cluster3D)
            .collect();
        assert_eq!(clusters.len(), 2);
        let mut srcs: Vec<_> = clusters.iter().map(|&k| f.truth.sources[k]).collect();
        srcs.sort();
        assert_eq!(srcs, vec![Some(0), Some(1)]);
        assert_eq!(f.truth.sources.len(), f.detections.len());
    }

    #[test]
    fn population_is_generated_deterministically() {
        let cfg = ScenarioConfig::reference(2);
        let a = Simulator::new(cfg.clone()).unwrap();
        let b = Simulator::new(cfg).unwrap();
        let p = PopulationConfig::default();
        assert_eq!(
            a.world().len(),
            p.walkers + p.standers + p.sitters + p.clutter + p.dynamic_clutter
        );
        assert!(a.world().specs().eq(b.world().specs()));
    }

    #[test]
    fn clutter_mostly_falls_outside_human_volume() {
        let bounds = VolumeBounds::default();
        let mut r = rng();
        let outside = (0..1000)
            .filter(|_| {
                let hard = r.random_bool(0.3);
                let [w, d, h] = clutter_dims(&mut r, hard);
                is_volume_negative(&Dims::new(w, d, h), &bounds)
            })
            .count();
        assert!((620..=780).contains(&outside), "{outside}");
    }

    #[test]
    fn scenario_toml_round_trip() {
        let cfg = ScenarioConfig::reference(9);
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(matches!(
            ScenarioConfig::from_toml_str("duration = -1.0"),
            Err(SimError::InvalidScenario(_))
        ));
        assert!(matches!(
            ScenarioConfig::from_toml_str("duration = ["),
            Err(SimError::Parse(_))
        ));
    }
}
