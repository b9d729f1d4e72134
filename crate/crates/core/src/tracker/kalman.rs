//! Constant-velocity Kalman filter with Cartesian position observations.

use serde::{Deserialize, Serialize};

use crate::model::Timestamp;
use crate::scalar::Scalar;

pub type Vec4<T> = [T; 4];
pub type Mat4<T> = [[T; 4]; 4];
pub type Mat2<T> = [[T; 2]; 2];

/// `(x, y, vx, vy)` with covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackState<T> {
    pub mean: Vec4<T>,
    pub covariance: Mat4<T>,
    /// Time the state refers to.
    pub last_update: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("innovation covariance is not invertible")]
pub struct NumericalBreakdown;

fn zeros<T: Scalar>() -> Mat4<T> {
    [[T::zero(); 4]; 4]
}

fn mul<T: Scalar>(a: &Mat4<T>, b: &Mat4<T>) -> Mat4<T> {
    let mut out = zeros();
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose<T: Scalar>(a: &Mat4<T>) -> Mat4<T> {
    let mut out = zeros();
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn symmetrize<T: Scalar>(a: &mut Mat4<T>) {
    let half = T::lit(0.5);
    for i in 0..4 {
        for j in (i + 1)..4 {
            let m = (a[i][j] + a[j][i]) * half;
            a[i][j] = m;
            a[j][i] = m;
        }
    }
}

pub fn identity<T: Scalar>() -> Mat4<T> {
    let mut m = zeros();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = T::one();
    }
    m
}

/// Lower Cholesky factor, or `None` when `a` is not positive definite.
pub fn cholesky<T: Scalar>(a: &Mat4<T>) -> Option<Mat4<T>> {
    let mut l = zeros();
    for i in 0..4 {
        for j in 0..=i {
            let s: T = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > T::zero()) || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

pub fn transition<T: Scalar>(dt: T) -> Mat4<T> {
    let mut f = identity();
    f[0][2] = dt;
    f[1][3] = dt;
    f
}

/// White-acceleration process noise scaled by `accel_std^2`.
pub fn process_noise<T: Scalar>(dt: T, accel_std: T) -> Mat4<T> {
    let q = accel_std * accel_std;
    let dt2 = dt * dt;
    let a = dt2 * dt2 / T::lit(4.0) * q;
    let b = dt2 * dt / T::lit(2.0) * q;
    let c = dt2 * q;
    let z = T::zero();
    [[a, z, b, z], [z, a, z, b], [b, z, c, z], [z, b, z, c]]
}

impl<T: Scalar> TrackState<T> {
    /// State at a measured position with isotropic uncertainty.
    pub fn at_position(pos: [T; 2], pos_var: T, vel_var: T, stamp: Timestamp) -> Self {
        let mut covariance = zeros();
        covariance[0][0] = pos_var;
        covariance[1][1] = pos_var;
        covariance[2][2] = vel_var;
        covariance[3][3] = vel_var;
        Self {
            mean: [pos[0], pos[1], T::zero(), T::zero()],
            covariance,
            last_update: stamp,
        }
    }

    /// Two-point initialization from consecutive position fixes.
    pub fn from_two_points(p0: [T; 2], p1: [T; 2], dt: T, pos_var: T, stamp: Timestamp) -> Self {
        let mut covariance = zeros();
        for k in 0..2 {
            covariance[k][k] = pos_var;
            covariance[k][k + 2] = pos_var / dt;
            covariance[k + 2][k] = pos_var / dt;
            covariance[k + 2][k + 2] = T::lit(2.0) * pos_var / (dt * dt);
        }
        Self {
            mean: [p1[0], p1[1], (p1[0] - p0[0]) / dt, (p1[1] - p0[1]) / dt],
            covariance,
            last_update: stamp,
        }
    }

    pub fn position(&self) -> [T; 2] {
        [self.mean[0], self.mean[1]]
    }

    pub fn speed(&self) -> T {
        (self.mean[2] * self.mean[2] + self.mean[3] * self.mean[3]).sqrt()
    }

    pub fn is_spd(&self) -> bool {
        cholesky(&self.covariance).is_some()
    }

    /// Innovation and its covariance for a position measurement.
    pub fn innovation(&self, z: [T; 2], obs_var: T) -> ([T; 2], Mat2<T>) {
        let p = &self.covariance;
        (
            [z[0] - self.mean[0], z[1] - self.mean[1]],
            [[p[0][0] + obs_var, p[0][1]], [p[1][0], p[1][1] + obs_var]],
        )
    }

    /// Squared Mahalanobis distance of a position measurement.
    pub fn mahalanobis2(&self, z: [T; 2], obs_var: T) -> Option<T> {
        let (nu, s) = self.innovation(z, obs_var);
        let inv = invert2(&s)?;
        Some(
            nu[0] * (inv[0][0] * nu[0] + inv[0][1] * nu[1])
                + nu[1] * (inv[1][0] * nu[0] + inv[1][1] * nu[1]),
        )
    }
}

pub fn invert2<T: Scalar>(s: &Mat2<T>) -> Option<Mat2<T>> {
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    if !(det > T::epsilon() * (s[0][0].abs() + s[1][1].abs()).powi(2)) || !det.is_finite() {
        return None;
    }
    Some([
        [s[1][1] / det, -s[0][1] / det],
        [-s[1][0] / det, s[0][0] / det],
    ])
}

/// Propagates `state` forward by `dt` seconds.
pub fn predict<T: Scalar>(state: &TrackState<T>, dt: T, accel_std: T) -> TrackState<T> {
    if dt <= T::zero() {
        return *state;
    }
    let f = transition(dt);
    let m = state.mean;
    let mean = [m[0] + dt * m[2], m[1] + dt * m[3], m[2], m[3]];
    let mut covariance = mul(&mul(&f, &state.covariance), &transpose(&f));
    let q = process_noise(dt, accel_std);
    for i in 0..4 {
        for j in 0..4 {
            covariance[i][j] = covariance[i][j] + q[i][j];
        }
    }
    symmetrize(&mut covariance);
    TrackState {
        mean,
        covariance,
        last_update: Timestamp(state.last_update.0 + dt.to_f64_lossy()),
    }
}

/// Joseph-form update with a position measurement of variance `obs_var`.
pub fn update<T: Scalar>(
    state: &TrackState<T>,
    z: [T; 2],
    obs_var: T,
) -> Result<TrackState<T>, NumericalBreakdown> {
    let (nu, s) = state.innovation(z, obs_var);
    let s_inv = invert2(&s).ok_or(NumericalBreakdown)?;
    let p = &state.covariance;
    // K = P H^T S^-1, with P H^T the first two columns of P.
    let mut k = [[T::zero(); 2]; 4];
    for i in 0..4 {
        for j in 0..2 {
            k[i][j] = p[i][0] * s_inv[0][j] + p[i][1] * s_inv[1][j];
        }
    }
    let mut mean = state.mean;
    for i in 0..4 {
        mean[i] = mean[i] + k[i][0] * nu[0] + k[i][1] * nu[1];
    }
    // (I - K H)
    let mut ikh = identity();
    for i in 0..4 {
        ikh[i][0] = ikh[i][0] - k[i][0];
        ikh[i][1] = ikh[i][1] - k[i][1];
    }
    let mut covariance = mul(&mul(&ikh, p), &transpose(&ikh));
    for i in 0..4 {
        for j in 0..4 {
            covariance[i][j] = covariance[i][j] + obs_var * (k[i][0] * k[j][0] + k[i][1] * k[j][1]);
        }
    }
    symmetrize(&mut covariance);
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(NumericalBreakdown);
    }
    Ok(TrackState {
        mean,
        covariance,
        last_update: state.last_update,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_state(mean: Vec4<f64>) -> TrackState<f64> {
        TrackState {
            mean,
            covariance: identity(),
            last_update: Timestamp(0.0),
        }
    }

    #[test]
    fn constant_velocity_prediction() {
        let s = predict(&unit_state([0.0, 0.0, 1.0, 0.0]), 1.0, 1.0);
        assert_eq!(s.mean, [1.0, 0.0, 1.0, 0.0]);
        assert_eq!(s.last_update, Timestamp(1.0));
    }

    #[test]
    fn zero_dt_is_identity() {
        let s0 = unit_state([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(predict(&s0, 0.0, 1.0), s0);
    }

    #[test]
    fn predicted_covariance_matches_hand_arithmetic() {
        // F F^T (0,0) = 1 + dt^2 = 2, Q (0,0) = dt^4 / 4 = 0.25.
        let s = predict(&unit_state([0.0; 4]), 1.0, 1.0);
        assert!((s.covariance[0][0] - 2.25).abs() < 1e-15);
        // F F^T (0,2) = dt = 1, Q (0,2) = dt^3 / 2.
        assert!((s.covariance[0][2] - 1.5).abs() < 1e-15);
        assert!((s.covariance[2][2] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn unit_gain_update() {
        let s = update(&unit_state([0.0; 4]), [1.0, 0.0], 1.0).unwrap();
        assert!((s.mean[0] - 0.5).abs() < 1e-15);
        assert_eq!(s.mean[1], 0.0);
        assert!((s.covariance[0][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_measurement_pins_position() {
        let s = update(&unit_state([0.0; 4]), [3.0, -2.0], 1e-12).unwrap();
        assert!((s.mean[0] - 3.0).abs() < 1e-9 && (s.mean[1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_innovation_keeps_position() {
        let s0 = unit_state([1.5, -0.5, 0.2, 0.1]);
        let s = update(&s0, [1.5, -0.5], 0.01).unwrap();
        assert_eq!(s.position(), s0.position());
    }

    #[test]
    fn singular_innovation_is_reported() {
        let mut s0 = unit_state([0.0; 4]);
        s0.covariance = zeros();
        assert_eq!(update(&s0, [1.0, 0.0], 0.0), Err(NumericalBreakdown));
    }

    proptest! {
        #[test]
        fn covariance_stays_spd(steps in prop::collection::vec((0.0..0.5f64, -5.0..5.0f64, -5.0..5.0f64, 1e-4..1.0f64), 1..60)) {
            let mut s = TrackState::at_position([0.0, 0.0], 0.04, 1.0, Timestamp(0.0));
            for (dt, x, y, std) in steps {
                s = predict(&s, dt, 1.0);
                prop_assert!(s.is_spd());
                s = update(&s, [x, y], std * std).unwrap();
                prop_assert!(s.is_spd(), "{:?}", s.covariance);
            }
        }
    }
}
