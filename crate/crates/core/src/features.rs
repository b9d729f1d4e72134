//! 61-dimensional cluster descriptor and `[-1, 1]` feature scaling.
//!
//! Layout (offsets into [`FeatureVector::values`]):
//!
//! | offset | len | feature |
//! |-------:|----:|---------|
//! | 0      | 1   | number of points |
//! | 1      | 1   | minimum point distance to the sensor |
//! | 2      | 6   | 3D covariance, upper triangle `xx xy xz yy yz zz` |
//! | 8      | 6   | moment-of-inertia tensor about the centroid, Frobenius-normalized, upper triangle |
//! | 14     | 20  | `(width, depth)` of 10 equal-height slices, bottom to top |
//! | 34     | 27  | intensity mean, std and a 25-bin normalized histogram over `[0, 1]` |

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Cluster;
use crate::scalar::{clamp, Scalar};

pub const FEATURE_DIM: usize = 61;
pub const SLICES: usize = 10;
pub const INTENSITY_BINS: usize = 25;

pub const OFFSET_COUNT: usize = 0;
pub const OFFSET_MIN_DISTANCE: usize = 1;
pub const OFFSET_COVARIANCE: usize = 2;
pub const OFFSET_INERTIA: usize = 8;
pub const OFFSET_SLICES: usize = 14;
pub const OFFSET_INTENSITY: usize = 34;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeatureError {
    #[error("cannot extract features from an empty cluster")]
    EmptyCluster,
    #[error("cannot fit a scaler on zero samples")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("feature vector contains non-finite values")]
    NonFinite,
}

/// Ordered feature values; dimension fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> FeatureVector<T> {
    /// Wraps a 61-dimensional vector of finite values.
    pub fn new(values: Vec<T>) -> Result<Self, FeatureError> {
        if values.len() != FEATURE_DIM {
            return Err(FeatureError::DimensionMismatch {
                expected: FEATURE_DIM,
                got: values.len(),
            });
        }
        Self::from_values(values)
    }

    /// Wraps a vector of any length (used for scaled or toy vectors).
    pub fn from_values(values: Vec<T>) -> Result<Self, FeatureError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(Self { values })
    }

    /// Zero-pads `head` to 61 dimensions.
    pub fn padded(head: &[T]) -> Self {
        let mut values = vec![T::zero(); FEATURE_DIM.max(head.len())];
        values[..head.len()].copy_from_slice(head);
        Self { values }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

impl<T> std::ops::Index<usize> for FeatureVector<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.values[i]
    }
}

/// Computes the 61-dimensional descriptor of `cluster`.
pub fn extract<T: Scalar>(
    cluster: &Cluster<T>,
    sensor_origin: [T; 3],
) -> Result<FeatureVector<T>, FeatureError> {
    let pts = &cluster.points.points;
    if pts.is_empty() {
        return Err(FeatureError::EmptyCluster);
    }
    let n = T::from_usize(pts.len()).unwrap();
    let mut out = Vec::with_capacity(FEATURE_DIM);

    out.push(n);

    let min_dist = pts
        .iter()
        .map(|p| {
            let (dx, dy, dz) = (
                p.x - sensor_origin[0],
                p.y - sensor_origin[1],
                p.z - sensor_origin[2],
            );
            (dx * dx + dy * dy + dz * dz).sqrt()
        })
        .fold(T::infinity(), T::min);
    out.push(min_dist);

    let mut mean = [T::zero(); 3];
    for p in pts {
        for (m, v) in mean.iter_mut().zip(p.xyz()) {
            *m = *m + v;
        }
    }
    mean = mean.map(|m| m / n);

    let mut cov = [[T::zero(); 3]; 3];
    for p in pts {
        let c = [p.x - mean[0], p.y - mean[1], p.z - mean[2]];
        for a in 0..3 {
            for b in a..3 {
                cov[a][b] = cov[a][b] + c[a] * c[b];
            }
        }
    }
    for a in 0..3 {
        for b in a..3 {
            cov[a][b] = cov[a][b] / n;
            out.push(cov[a][b]);
        }
    }

    // I = sum(|r|^2 E - r r^T) over centred points.
    let mut inertia = [[T::zero(); 3]; 3];
    for p in pts {
        let r = [p.x - mean[0], p.y - mean[1], p.z - mean[2]];
        let r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
        for a in 0..3 {
            for b in a..3 {
                let diag = if a == b { r2 } else { T::zero() };
                inertia[a][b] = inertia[a][b] + diag - r[a] * r[b];
            }
        }
    }
    let two = T::lit(2.0);
    let mut frob2 = T::zero();
    for a in 0..3 {
        for b in a..3 {
            let w = if a == b { T::one() } else { two };
            frob2 = frob2 + w * inertia[a][b] * inertia[a][b];
        }
    }
    let frob = frob2.sqrt();
    for a in 0..3 {
        for b in a..3 {
            out.push(if frob > T::zero() {
                inertia[a][b] / frob
            } else {
                T::zero()
            });
        }
    }

    let z_min = pts.iter().map(|p| p.z).fold(T::infinity(), T::min);
    let z_max = pts.iter().map(|p| p.z).fold(T::neg_infinity(), T::max);
    let slices = T::from_usize(SLICES).unwrap();
    let band = (z_max - z_min) / slices;
    let mut lo = [[T::infinity(); 2]; SLICES];
    let mut hi = [[T::neg_infinity(); 2]; SLICES];
    for p in pts {
        let k = if band > T::zero() {
            ((p.z - z_min) / band)
                .floor()
                .to_usize()
                .unwrap_or(0)
                .min(SLICES - 1)
        } else {
            0
        };
        lo[k][0] = lo[k][0].min(p.x);
        lo[k][1] = lo[k][1].min(p.y);
        hi[k][0] = hi[k][0].max(p.x);
        hi[k][1] = hi[k][1].max(p.y);
    }
    for k in 0..SLICES {
        if lo[k][0].is_finite() {
            out.push(hi[k][0] - lo[k][0]);
            out.push(hi[k][1] - lo[k][1]);
        } else {
            out.push(T::zero());
            out.push(T::zero());
        }
    }

    let i_mean = pts.iter().map(|p| p.intensity).sum::<T>() / n;
    let i_var = pts
        .iter()
        .map(|p| (p.intensity - i_mean) * (p.intensity - i_mean))
        .sum::<T>()
        / n;
    out.push(i_mean);
    out.push(i_var.sqrt());
    let bins = T::from_usize(INTENSITY_BINS).unwrap();
    let mut hist = [0usize; INTENSITY_BINS];
    for p in pts {
        let v = clamp(p.intensity, T::zero(), T::one());
        let b = (v * bins)
            .floor()
            .to_usize()
            .unwrap_or(0)
            .min(INTENSITY_BINS - 1);
        hist[b] += 1;
    }
    out.extend(hist.iter().map(|&c| T::from_usize(c).unwrap() / n));

    debug_assert_eq!(out.len(), FEATURE_DIM);
    FeatureVector::new(out)
}

/// Per-dimension min/max fitted on a training batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler<T> {
    pub min: Vec<T>,
    pub max: Vec<T>,
}

impl<T: Scalar> FeatureScaler<T> {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn is_degenerate(&self, dim: usize) -> bool {
        !(self.max[dim] > self.min[dim])
    }

    pub fn degenerate_dims(&self) -> usize {
        (0..self.dim()).filter(|&k| self.is_degenerate(k)).count()
    }
}

pub fn fit_scaler<'a, T, I>(samples: I) -> Result<FeatureScaler<T>, FeatureError>
where
    T: Scalar,
    I: IntoIterator<Item = &'a FeatureVector<T>>,
{
    let mut it = samples.into_iter();
    let first = it.next().ok_or(FeatureError::EmptyInput)?;
    let mut min = first.values().to_vec();
    let mut max = first.values().to_vec();
    for v in it {
        if v.dim() != min.len() {
            return Err(FeatureError::DimensionMismatch {
                expected: min.len(),
                got: v.dim(),
            });
        }
        for (k, &x) in v.values().iter().enumerate() {
            min[k] = min[k].min(x);
            max[k] = max[k].max(x);
        }
    }
    Ok(FeatureScaler { min, max })
}

pub fn apply_scaler<T: Scalar>(
    scaler: &FeatureScaler<T>,
    v: &FeatureVector<T>,
) -> Result<FeatureVector<T>, FeatureError> {
    if v.dim() != scaler.dim() {
        return Err(FeatureError::DimensionMismatch {
            expected: scaler.dim(),
            got: v.dim(),
        });
    }
    let two = T::lit(2.0);
    let values = v
        .values()
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            if scaler.is_degenerate(k) {
                T::zero()
            } else {
                let s = two * (x - scaler.min[k]) / (scaler.max[k] - scaler.min[k]) - T::one();
                clamp(s, -T::one(), T::one())
            }
        })
        .collect();
    Ok(FeatureVector { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Point;
    use proptest::prelude::*;

    fn cluster(points: Vec<Point<f64>>) -> Cluster<f64> {
        Cluster::from_points(points, 0.01).unwrap()
    }

    #[test]
    fn count_feature_is_point_count() {
        let pts = (0..100)
            .map(|i| Point::new(i as f64 * 0.01, 0.0, 1.0, 0.5))
            .collect();
        let f = extract(&cluster(pts), [0.0; 3]).unwrap();
        assert_eq!(f.dim(), FEATURE_DIM);
        assert_eq!(f[OFFSET_COUNT], 100.0);
    }

    #[test]
    fn single_point_statistics_degenerate() {
        let f = extract(&cluster(vec![Point::new(0.0, 3.0, 0.0, 0.5)]), [0.0; 3]).unwrap();
        assert_eq!(f[OFFSET_MIN_DISTANCE], 3.0);
        assert!(f.values()[OFFSET_COVARIANCE..OFFSET_COVARIANCE + 6]
            .iter()
            .all(|&v| v == 0.0));
        assert!(f.values()[OFFSET_INERTIA..OFFSET_INERTIA + 6]
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(f[OFFSET_INTENSITY], 0.5);
        assert_eq!(f[OFFSET_INTENSITY + 1], 0.0);
        // 0.5 * 25 = 12.5 -> bin 12.
        assert_eq!(f[OFFSET_INTENSITY + 2 + 12], 1.0);
    }

    #[test]
    fn gridded_box_slices_have_box_extent() {
        // 4 x 4 x 10 lattice: x in {0, .1, .2, .3}, y in {0, .15, .3, .45}, z in 0.2 .. 1.1.
        // Ten layers over [z_min, z_max] put exactly one layer per band, each
        // spanning the full 0.3 width and 0.45 depth.
        let mut pts = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..10 {
                    pts.push(Point::new(
                        i as f64 * 0.1,
                        j as f64 * 0.15,
                        0.2 + k as f64 * 0.1,
                        0.3,
                    ));
                }
            }
        }
        let f = extract(&cluster(pts), [-5.0, 0.0, 0.0]).unwrap();
        for k in 0..SLICES {
            assert!(
                (f[OFFSET_SLICES + 2 * k] - 0.3).abs() < 1e-12,
                "slice {k} width"
            );
            assert!(
                (f[OFFSET_SLICES + 2 * k + 1] - 0.45).abs() < 1e-12,
                "slice {k} depth"
            );
        }
    }

    #[test]
    fn empty_cluster_is_rejected() {
        let mut c = cluster(vec![Point::new(0.0, 0.0, 0.5, 0.5)]);
        c.points.points.clear();
        assert_eq!(extract(&c, [0.0; 3]), Err(FeatureError::EmptyCluster));
    }

    #[test]
    fn scaler_fit_and_apply() {
        let single = FeatureVector::padded(&[1.0, 2.0]);
        let s = fit_scaler([&single]).unwrap();
        assert_eq!(s.degenerate_dims(), FEATURE_DIM);
        assert!(apply_scaler(&s, &single)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));

        let a = FeatureVector::padded(&[0.0]);
        let b = FeatureVector::padded(&[10.0]);
        let s = fit_scaler([&a, &b]).unwrap();
        assert_eq!((s.min[0], s.max[0]), (0.0, 10.0));
        let at = |x: f64| apply_scaler(&s, &FeatureVector::padded(&[x])).unwrap()[0];
        assert_eq!(at(0.0), -1.0);
        assert_eq!(at(5.0), 0.0);
        assert_eq!(at(11.0), 1.0);

        assert_eq!(
            fit_scaler::<f64, _>(std::iter::empty()),
            Err(FeatureError::EmptyInput)
        );
        assert!(matches!(
            apply_scaler(&s, &FeatureVector::from_values(vec![1.0]).unwrap()),
            Err(FeatureError::DimensionMismatch {
                expected: 61,
                got: 1
            })
        ));
    }

    fn arb_points() -> impl Strategy<Value = Vec<Point<f64>>> {
        prop::collection::vec(
            (-1.0..1.0f64, -1.0..1.0f64, 0.1..2.0f64, 0.0..1.0f64)
                .prop_map(|(x, y, z, i)| Point::new(x, y, z, i)),
            1..60,
        )
    }

    proptest! {
        #[test]
        fn shape_features_are_translation_invariant_in_xy(pts in arb_points(), tx in -20.0..20.0f64, ty in -20.0..20.0f64) {
            let moved: Vec<_> = pts.iter().map(|p| Point::new(p.x + tx, p.y + ty, p.z, p.intensity)).collect();
            let a = extract(&cluster(pts), [0.0; 3]).unwrap();
            let b = extract(&cluster(moved), [0.0; 3]).unwrap();
            prop_assert_eq!(a[0], b[0]);
            for k in OFFSET_COVARIANCE..FEATURE_DIM {
                prop_assert!((a[k] - b[k]).abs() < 1e-6, "dim {} {} vs {}", k, a[k], b[k]);
            }
        }

        #[test]
        fn histogram_sums_to_one(pts in arb_points()) {
            let f = extract(&cluster(pts), [0.0; 3]).unwrap();
            let s: f64 = f.values()[OFFSET_INTENSITY + 2..].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn fitted_scaler_maps_batch_into_unit_cube(rows in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, FEATURE_DIM), 1..20)) {
            let batch: Vec<_> = rows.into_iter().map(|r| FeatureVector::new(r).unwrap()).collect();
            let s = fit_scaler(&batch).unwrap();
            for v in &batch {
                let scaled = apply_scaler(&s, v).unwrap();
                prop_assert!(scaled.values().iter().all(|x| (-1.0..=1.0).contains(x)));
            }
        }
    }
}
