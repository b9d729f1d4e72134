//! Gated nearest-neighbour data association.
//!
//! Distances are squared Mahalanobis distances of the innovation. Pairs
//! beyond the chi-square gate or the Euclidean innovation cap are never
//! matched; among gated pairs the matching with the most pairs and, among
//! those, the least total distance is chosen.

use crate::scalar::Scalar;

use super::kalman::TrackState;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Association {
    /// `(track index, detection index, squared distance)`, sorted by track.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unassigned_detections: Vec<usize>,
    pub unassigned_tracks: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate<T> {
    /// Largest squared Mahalanobis distance.
    pub chi2: T,
    /// Largest Euclidean innovation in meters. Bounds the reach of tracks
    /// whose covariance has grown while coasting.
    pub max_distance: T,
}

impl<T: Scalar> Gate<T> {
    /// A pure chi-square gate.
    pub fn chi2(chi2: T) -> Self {
        Self {
            chi2,
            max_distance: T::infinity(),
        }
    }

    fn admits(&self, t: &TrackState<T>, z: [T; 2], obs_var: T) -> Option<T> {
        let p = t.position();
        let (dx, dy) = (z[0] - p[0], z[1] - p[1]);
        if dx * dx + dy * dy > self.max_distance * self.max_distance {
            return None;
        }
        t.mahalanobis2(z, obs_var).filter(|&d| d <= self.chi2)
    }
}

/// Squared Mahalanobis distances, `None` outside the gate.
pub fn gated_costs<T: Scalar>(
    tracks: &[TrackState<T>],
    detections: &[[T; 2]],
    obs_var: T,
    gate: Gate<T>,
) -> Vec<Vec<Option<f64>>> {
    tracks
        .iter()
        .map(|t| {
            detections
                .iter()
                .map(|&z| gate.admits(t, z, obs_var).map(|d| d.to_f64_lossy()))
                .collect()
        })
        .collect()
}

pub fn associate<T: Scalar>(
    tracks: &[TrackState<T>],
    detections: &[[T; 2]],
    obs_var: T,
    gate: Gate<T>,
) -> Association {
    if tracks.is_empty() {
        return Association {
            unassigned_detections: (0..detections.len()).collect(),
            ..Default::default()
        };
    }
    assign(&gated_costs(tracks, detections, obs_var, gate))
}

/// Solves the gated assignment problem for a cost matrix `costs[track][det]`.
pub fn assign(costs: &[Vec<Option<f64>>]) -> Association {
    let n_tracks = costs.len();
    let n_dets = costs.first().map_or(0, Vec::len);
    if n_tracks == 0 || n_dets == 0 {
        return Association {
            pairs: Vec::new(),
            unassigned_detections: (0..n_dets).collect(),
            unassigned_tracks: (0..n_tracks).collect(),
        };
    }
    // Forbidden cells cost more than any feasible assignment, so minimizing
    // total cost first maximizes the number of gated pairs.
    let feasible_total: f64 = costs.iter().flatten().flatten().map(|c| c.abs()).sum();
    let forbidden = 1.0 + 2.0 * feasible_total;
    let transpose = n_tracks > n_dets;
    let (rows, cols) = if transpose {
        (n_dets, n_tracks)
    } else {
        (n_tracks, n_dets)
    };
    let cell = |r: usize, c: usize| -> f64 {
        let v = if transpose { costs[c][r] } else { costs[r][c] };
        v.unwrap_or(forbidden)
    };
    let row_to_col = hungarian(rows, cols, cell);

    let mut pairs = Vec::new();
    for (r, &c) in row_to_col.iter().enumerate() {
        let (t, d) = if transpose { (c, r) } else { (r, c) };
        if let Some(cost) = costs[t][d] {
            pairs.push((t, d, cost));
        }
    }
    pairs.sort_by_key(|p| p.0);
    let unassigned_detections = (0..n_dets)
        .filter(|d| !pairs.iter().any(|p| p.1 == *d))
        .collect();
    let unassigned_tracks = (0..n_tracks)
        .filter(|t| !pairs.iter().any(|p| p.0 == *t))
        .collect();
    Association {
        pairs,
        unassigned_detections,
        unassigned_tracks,
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
fn hungarian(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    debug_assert!(rows <= cols);
    let inf = f64::INFINITY;
    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; rows];
    for j in 1..=cols {
        if owner[j] > 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    row_to_col
}
