//! Range-adaptive Euclidean segmentation of a 3D scan into clusters.
//!
//! Two points are linked when their distance is within
//! `base_tolerance + tolerance_gain * min(r1, r2)`, where `r` is the
//! horizontal range from the sensor at the origin. Clusters are the
//! connected components of that graph after a flat ground cut.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::{Cluster, Point, PointCloud3D};
use crate::scalar::Scalar;

/// Smallest box extent assigned to a cluster along any axis, in meters.
pub const MIN_EXTENT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringParams<T> {
    pub base_tolerance: T,
    /// Extra tolerance per meter of range.
    pub tolerance_gain: T,
    pub min_points: usize,
    pub max_points: usize,
    /// Points at or below this height are treated as ground.
    pub ground_z_cut: T,
}

impl<T: Scalar> Default for ClusteringParams<T> {
    fn default() -> Self {
        Self {
            base_tolerance: T::lit(0.3),
            tolerance_gain: T::lit(0.02),
            min_points: 5,
            max_points: 5000,
            ground_z_cut: T::lit(0.1),
        }
    }
}

impl<T: Scalar> ClusteringParams<T> {
    pub fn is_valid(&self) -> bool {
        self.base_tolerance > T::zero()
            && self.tolerance_gain >= T::zero()
            && self.min_points >= 1
            && self.max_points >= self.min_points
    }

    /// Linking tolerance for a pair of points at the given ranges.
    pub fn tolerance(&self, r1: T, r2: T) -> T {
        self.base_tolerance + self.tolerance_gain * r1.min(r2)
    }
}

fn lexicographic<T: Scalar>(a: &Point<T>, b: &Point<T>) -> Ordering {
    let key = |p: &Point<T>| [p.x, p.y, p.z, p.intensity].map(|v| v.to_f64_lossy());
    let (ka, kb) = (key(a), key(b));
    ka.iter()
        .zip(kb.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

fn dist2<T: Scalar>(a: &Point<T>, b: &Point<T>) -> T {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    dx * dx + dy * dy + dz * dz
}

/// Segments `scan` into clusters.
///
/// Output order is deterministic: points are sorted lexicographically before
/// region growing, clusters are ordered by their first point and each
/// cluster keeps its points in sorted order. Components outside
/// `[min_points, max_points]` are dropped.
pub fn segment<T: Scalar>(scan: &PointCloud3D<T>, params: &ClusteringParams<T>) -> Vec<Cluster<T>> {
    let mut pts: Vec<Point<T>> = scan
        .points
        .iter()
        .filter(|p| p.is_finite() && p.z > params.ground_z_cut)
        .copied()
        .collect();
    if pts.is_empty() {
        return Vec::new();
    }
    pts.sort_by(lexicographic);

    let ranges: Vec<T> = pts.iter().map(|p| (p.x * p.x + p.y * p.y).sqrt()).collect();
    let max_range = ranges.iter().copied().fold(T::zero(), T::max);
    // Largest tolerance any pair can have, used as the grid cell size so a
    // neighbour is always within the surrounding 27 cells.
    let cell = params.tolerance(max_range, max_range).max(T::lit(1e-6));
    let cell_of = |p: &Point<T>| -> (i64, i64, i64) {
        let f = |v: T| (v / cell).floor().to_i64().unwrap_or(0);
        (f(p.x), f(p.y), f(p.z))
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in pts.iter().enumerate() {
        grid.entry(cell_of(p)).or_default().push(i);
    }

    let mut component = vec![usize::MAX; pts.len()];
    let mut clusters = Vec::new();
    let mut queue = Vec::new();
    for seed in 0..pts.len() {
        if component[seed] != usize::MAX {
            continue;
        }
        let id = seed;
        component[seed] = id;
        queue.clear();
        queue.push(seed);
        let mut members = vec![seed];
        while let Some(i) = queue.pop() {
            let (cx, cy, cz) = cell_of(&pts[i]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        for &j in bucket {
                            if component[j] != usize::MAX {
                                continue;
                            }
                            let tol = params.tolerance(ranges[i], ranges[j]);
                            if dist2(&pts[i], &pts[j]) <= tol * tol {
                                component[j] = id;
                                members.push(j);
                                queue.push(j);
                            }
                        }
                    }
                }
            }
        }
        if members.len() < params.min_points || members.len() > params.max_points {
            continue;
        }
        members.sort_unstable();
        let points = members.iter().map(|&i| pts[i]).collect();
        if let Ok(c) = Cluster::from_points(points, T::lit(MIN_EXTENT)) {
            clusters.push(c);
        }
    }
    clusters
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// A 3×3×3 lattice with 0.1 m spacing around (cx, cy, 1.0).
    fn blob(cx: f64, cy: f64) -> Vec<Point<f64>> {
        let mut v = Vec::new();
        for i in -1..=1 {
            for j in -1..=1 {
                for k in -1..=1 {
                    v.push(Point::new(
                        cx + 0.1 * i as f64,
                        cy + 0.1 * j as f64,
                        1.0 + 0.1 * k as f64,
                        0.5,
                    ));
                }
            }
        }
        v
    }

    fn params(base: f64, gain: f64) -> ClusteringParams<f64> {
        ClusteringParams {
            base_tolerance: base,
            tolerance_gain: gain,
            ..Default::default()
        }
    }

    #[test]
    fn empty_scan_gives_no_clusters() {
        assert!(segment(&PointCloud3D::<f64>::default(), &Default::default()).is_empty());
    }

    #[test]
    fn distant_groups_stay_apart() {
        // Blob edges are 2.0 - 0.2 = 1.8 m apart at ~5 m range.
        let mut pts = blob(5.0, -1.0);
        pts.extend(blob(5.0, 1.0));
        let out = segment(&PointCloud3D::new(pts), &params(0.4, 0.0));
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|c| c.len() == 27));
    }

    #[test]
    fn far_groups_merge_under_range_adaptive_tolerance() {
        // Blob centres 0.7 m apart, nearest faces 0.5 m apart, both at ~15 m.
        // Near tolerance 0.3 would split them; at 15 m it is 0.3 + 0.02 * 15 = 0.6.
        let mut pts = blob(15.0, -0.35);
        pts.extend(blob(15.0, 0.35));
        let gap = 0.5;
        let r_min = pts
            .iter()
            .map(|p| (p.x * p.x + p.y * p.y).sqrt())
            .fold(f64::MAX, f64::min);
        assert!(r_min > 14.8);
        assert!(gap <= 0.3 + 0.02 * r_min);
        let out = segment(&PointCloud3D::new(pts.clone()), &params(0.3, 0.02));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 54);

        let fixed = segment(&PointCloud3D::new(pts), &params(0.3, 0.0));
        assert_eq!(fixed.len(), 2);
    }

    #[test]
    fn ground_points_and_small_groups_are_dropped() {
        let mut pts = blob(3.0, 0.0);
        pts.push(Point::new(2.0, 2.0, 0.05, 0.1));
        pts.push(Point::new(-4.0, 0.0, 1.0, 0.1));
        let out = segment(&PointCloud3D::new(pts), &Default::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 27);
        let c = &out[0];
        assert!((c.bounds.w - 0.2).abs() < 1e-9);
        assert!((c.centroid[0] - 3.0).abs() < 1e-9);
        assert_eq!(c.validate(), Ok(()));
    }

    #[test]
    fn oversized_components_are_dropped() {
        let out = segment(
            &PointCloud3D::new(blob(3.0, 0.0)),
            &ClusteringParams {
                max_points: 10,
                ..Default::default()
            },
        );
        assert!(out.is_empty());
    }

    #[test]
    fn output_is_independent_of_input_order() {
        let mut pts = blob(4.0, 0.0);
        pts.extend(blob(-3.0, 2.0));
        let a = segment(&PointCloud3D::new(pts.clone()), &Default::default());
        pts.reverse();
        let b = segment(&PointCloud3D::new(pts), &Default::default());
        assert_eq!(a, b);
    }

    fn arb_scan() -> impl Strategy<Value = Vec<Point<f64>>> {
        prop::collection::vec(
            (-8.0..8.0f64, -8.0..8.0f64, 0.0..2.0f64, 0.0..1.0f64)
                .prop_map(|(x, y, z, i)| Point::new(x, y, z, i)),
            0..120,
        )
    }

    proptest! {
        #[test]
        fn clusters_partition_the_non_ground_points(pts in arb_scan()) {
            let p = ClusteringParams { min_points: 1, ..Default::default() };
            let out = segment(&PointCloud3D::new(pts.clone()), &p);
            let total: usize = out.iter().map(|c| c.len()).sum();
            let above = pts.iter().filter(|q| q.z > p.ground_z_cut).count();
            prop_assert_eq!(total, above);
            let mut seen: Vec<[u64; 4]> = out
                .iter()
                .flat_map(|c| c.points.points.iter())
                .map(|q| [q.x.to_bits(), q.y.to_bits(), q.z.to_bits(), q.intensity.to_bits()])
                .collect();
            let mut input: Vec<[u64; 4]> = pts
                .iter()
                .filter(|q| q.z > p.ground_z_cut)
                .map(|q| [q.x.to_bits(), q.y.to_bits(), q.z.to_bits(), q.intensity.to_bits()])
                .collect();
            seen.sort_unstable();
            input.sort_unstable();
            prop_assert_eq!(seen, input);
            for c in &out {
                prop_assert!(c.validate().is_ok());
            }
        }

        #[test]
        fn larger_base_tolerance_never_adds_clusters(pts in arb_scan(), a in 0.05..1.0f64, extra in 0.0..1.0f64) {
            let lo = ClusteringParams { base_tolerance: a, min_points: 1, max_points: usize::MAX, ..Default::default() };
            let hi = ClusteringParams { base_tolerance: a + extra, ..lo };
            let scan = PointCloud3D::new(pts);
            prop_assert!(segment(&scan, &hi).len() <= segment(&scan, &lo).len());
        }
    }
}
