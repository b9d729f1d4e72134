//! Sigmoid calibration of SVM decision values.
//!
//! Fits `P(y = 1 | f) = 1 / (1 + exp(A f + B))` by Newton's method with
//! backtracking on the regularized-target log-likelihood.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattSigmoid<T> {
    pub a: T,
    pub b: T,
}

/// Smallest slope magnitude kept after fitting; larger decision values
/// always map to larger probabilities.
const MIN_SLOPE: f64 = 1e-6;

impl<T: Scalar> PlattSigmoid<T> {
    pub fn probability(&self, f: T) -> T {
        let z = f * self.a + self.b;
        if z >= T::zero() {
            let e = (-z).exp();
            e / (T::one() + e)
        } else {
            T::one() / (T::one() + z.exp())
        }
    }

    /// Fits the sigmoid on decision values with boolean targets.
    pub fn fit(decisions: &[T], positive: &[bool], max_iter: usize) -> Self {
        assert_eq!(decisions.len(), positive.len());
        let (zero, one) = (T::zero(), T::one());
        let prior1 = positive.iter().filter(|&&p| p).count();
        let prior0 = positive.len() - prior1;
        let p1 = T::from_usize(prior1).unwrap();
        let p0 = T::from_usize(prior0).unwrap();
        let two = T::lit(2.0);
        let hi_target = (p1 + one) / (p1 + two);
        let lo_target = one / (p0 + two);
        let targets: Vec<T> = positive
            .iter()
            .map(|&p| if p { hi_target } else { lo_target })
            .collect();

        let min_step = T::lit(1e-10);
        let sigma = T::lit(1e-12);
        let eps = T::lit(1e-5);

        let mut a = zero;
        let mut b = ((p0 + one) / (p1 + one)).ln();
        let objective = |a: T, b: T| -> T {
            decisions
                .iter()
                .zip(&targets)
                .map(|(&f, &t)| {
                    let z = f * a + b;
                    if z >= zero {
                        t * z + (one + (-z).exp()).ln()
                    } else {
                        (t - one) * z + (one + z.exp()).ln()
                    }
                })
                .sum::<T>()
        };
        let mut fval = objective(a, b);

        for _ in 0..max_iter {
            let (mut h11, mut h22, mut h21) = (sigma, sigma, zero);
            let (mut g1, mut g2) = (zero, zero);
            for (&f, &t) in decisions.iter().zip(&targets) {
                let z = f * a + b;
                let (p, q) = if z >= zero {
                    let e = (-z).exp();
                    (e / (one + e), one / (one + e))
                } else {
                    let e = z.exp();
                    (one / (one + e), e / (one + e))
                };
                let d2 = p * q;
                h11 = h11 + f * f * d2;
                h22 = h22 + d2;
                h21 = h21 + f * d2;
                let d1 = t - p;
                g1 = g1 + f * d1;
                g2 = g2 + d1;
            }
            if g1.abs() < eps && g2.abs() < eps {
                break;
            }
            let det = h11 * h22 - h21 * h21;
            let da = -(h22 * g1 - h21 * g2) / det;
            let db = -(-h21 * g1 + h11 * g2) / det;
            let gd = g1 * da + g2 * db;

            let mut step = one;
            let mut improved = false;
            while step >= min_step {
                let (na, nb) = (a + step * da, b + step * db);
                let nf = objective(na, nb);
                if nf < fval + T::lit(1e-4) * step * gd {
                    a = na;
                    b = nb;
                    fval = nf;
                    improved = true;
                    break;
                }
                step = step / two;
            }
            if !improved {
                break;
            }
        }
        let min_slope = T::lit(MIN_SLOPE);
        if a > -min_slope {
            a = -min_slope;
        }
        Self { a, b }
    }
}
