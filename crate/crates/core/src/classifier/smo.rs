//! Sequential minimal optimization for the C-SVC dual.
//!
//! Solves `min 1/2 a'Qa - e'a` subject to `0 <= a_i <= C` and `y'a = 0`,
//! with `Q_ij = y_i y_j K(x_i, x_j)`. Working pairs are chosen with
//! second-order information; the solver stops once the maximal KKT
//! violation drops below the tolerance.

use std::collections::{HashMap, VecDeque};

use crate::scalar::Scalar;

/// Gaussian RBF kernel `exp(-gamma * |a - b|^2)`.
#[derive(Debug, Clone, Copy)]
pub struct RbfKernel<T> {
    pub gamma: T,
}

impl<T: Scalar> RbfKernel<T> {
    pub fn eval(&self, a: &[T], b: &[T]) -> T {
        let d2 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
        (-self.gamma * d2).exp()
    }
}

/// Bounded FIFO cache of kernel rows.
struct RowCache<'a, T> {
    data: &'a [Vec<T>],
    kernel: RbfKernel<T>,
    rows: HashMap<usize, Vec<T>>,
    order: VecDeque<usize>,
    capacity: usize,
}

const CACHE_BYTES: usize = 128 << 20;

impl<'a, T: Scalar> RowCache<'a, T> {
    fn new(data: &'a [Vec<T>], kernel: RbfKernel<T>) -> Self {
        let row_bytes = data.len().max(1) * std::mem::size_of::<T>();
        Self {
            data,
            kernel,
            rows: HashMap::new(),
            order: VecDeque::new(),
            capacity: (CACHE_BYTES / row_bytes).max(2),
        }
    }

    fn row(&mut self, i: usize) -> &[T] {
        if !self.rows.contains_key(&i) {
            if self.rows.len() >= self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.rows.remove(&old);
                }
            }
            let xi = &self.data[i];
            let row = self
                .data
                .iter()
                .map(|xj| self.kernel.eval(xi, xj))
                .collect();
            self.rows.insert(i, row);
            self.order.push_back(i);
        }
        &self.rows[&i]
    }
}

#[derive(Debug, Clone)]
pub struct SmoSolution<T> {
    pub alpha: Vec<T>,
    /// Offset; the decision function is `sum a_i y_i K(x_i, x) - rho`.
    pub rho: T,
    pub iterations: usize,
    /// Final maximal KKT violation.
    pub violation: T,
    pub converged: bool,
}

impl<T: Scalar> SmoSolution<T> {
    /// Signed dual coefficients `a_i y_i`.
    pub fn coefficients(&self, y: &[T]) -> Vec<T> {
        self.alpha.iter().zip(y).map(|(&a, &s)| a * s).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SmoParams<T> {
    pub c: T,
    pub tolerance: T,
    pub max_iterations: usize,
}

/// Solves the dual for points `x` with labels `y` in `{-1, +1}`.
pub fn solve<T: Scalar>(
    x: &[Vec<T>],
    y: &[T],
    kernel: RbfKernel<T>,
    params: SmoParams<T>,
) -> SmoSolution<T> {
    let n = x.len();
    let c = params.c;
    let tau = T::lit(1e-12);
    let zero = T::zero();
    let mut alpha = vec![zero; n];
    let mut grad = vec![-T::one(); n];
    let diag: Vec<T> = x.iter().map(|xi| kernel.eval(xi, xi)).collect();
    let mut cache = RowCache::new(x, kernel);

    let is_upper = |a: T| a >= c;
    let is_lower = |a: T| a <= zero;
    let in_up =
        |t: usize, a: &[T]| (y[t] > zero && !is_upper(a[t])) || (y[t] < zero && !is_lower(a[t]));
    let in_low =
        |t: usize, a: &[T]| (y[t] > zero && !is_lower(a[t])) || (y[t] < zero && !is_upper(a[t]));

    let mut iterations = 0;
    let mut violation = T::infinity();
    let mut converged = false;
    while iterations < params.max_iterations {
        let mut gmax = T::neg_infinity();
        let mut i_sel = None;
        for t in 0..n {
            if in_up(t, &alpha) {
                let v = -y[t] * grad[t];
                if v >= gmax {
                    gmax = v;
                    i_sel = Some(t);
                }
            }
        }
        let Some(i) = i_sel else {
            violation = zero;
            converged = true;
            break;
        };
        let ki: Vec<T> = cache.row(i).to_vec();

        let mut gmax2 = T::neg_infinity();
        let mut obj_min = T::infinity();
        let mut j_sel = None;
        for t in 0..n {
            if !in_low(t, &alpha) {
                continue;
            }
            let yg = y[t] * grad[t];
            if yg >= gmax2 {
                gmax2 = yg;
            }
            let b = gmax + yg;
            if b > zero {
                let mut a = diag[i] + diag[t] - T::lit(2.0) * ki[t];
                if a <= zero {
                    a = tau;
                }
                let obj = -(b * b) / a;
                if obj <= obj_min {
                    obj_min = obj;
                    j_sel = Some(t);
                }
            }
        }
        violation = gmax + gmax2;
        if violation < params.tolerance {
            converged = true;
            break;
        }
        let Some(j) = j_sel else {
            converged = true;
            break;
        };
        iterations += 1;
        let kj: Vec<T> = cache.row(j).to_vec();

        let (old_ai, old_aj) = (alpha[i], alpha[j]);
        let qij = y[i] * y[j] * ki[j];
        if y[i] != y[j] {
            let mut quad = diag[i] + diag[j] + T::lit(2.0) * qij;
            if quad <= zero {
                quad = tau;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] = alpha[i] + delta;
            alpha[j] = alpha[j] + delta;
            if diff > zero {
                if alpha[j] < zero {
                    alpha[j] = zero;
                    alpha[i] = diff;
                }
            } else if alpha[i] < zero {
                alpha[i] = zero;
                alpha[j] = -diff;
            }
            if diff > zero {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = diag[i] + diag[j] - T::lit(2.0) * qij;
            if quad <= zero {
                quad = tau;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] = alpha[i] - delta;
            alpha[j] = alpha[j] + delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < zero {
                alpha[j] = zero;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < zero {
                alpha[i] = zero;
                alpha[j] = sum;
            }
        }

        let dai = alpha[i] - old_ai;
        let daj = alpha[j] - old_aj;
        for t in 0..n {
            // Q_ti = y_t y_i K_ti
            grad[t] = grad[t] + y[t] * (y[i] * ki[t] * dai + y[j] * kj[t] * daj);
        }
    }

    let rho = compute_rho(&alpha, &grad, y, c);
    SmoSolution {
        alpha,
        rho,
        iterations,
        violation,
        converged,
    }
}

fn compute_rho<T: Scalar>(alpha: &[T], grad: &[T], y: &[T], c: T) -> T {
    let zero = T::zero();
    let mut ub = T::infinity();
    let mut lb = T::neg_infinity();
    let mut sum = zero;
    let mut free = 0usize;
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < zero {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= zero {
            if y[t] > zero {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum = sum + yg;
        }
    }
    if free > 0 {
        sum / T::from_usize(free).unwrap()
    } else {
        (ub + lb) / T::lit(2.0)
    }
}

/// Decision value `sum coef_i K(sv_i, x) - rho`.
pub fn decision<T: Scalar>(
    support: &[Vec<T>],
    coef: &[T],
    rho: T,
    kernel: RbfKernel<T>,
    x: &[T],
) -> T {
    support
        .iter()
        .zip(coef)
        .map(|(sv, &a)| a * kernel.eval(sv, x))
        .sum::<T>()
        - rho
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SmoParams<f64> {
        SmoParams {
            c: 1.0,
            tolerance: 1e-6,
            max_iterations: 100_000,
        }
    }

    #[test]
    fn xor_is_separated_by_rbf() {
        let x = vec![
            vec![1.0, 1.0],
            vec![-1.0, -1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
        ];
        let y = vec![1.0, 1.0, -1.0, -1.0];
        let k = RbfKernel { gamma: 1.0 };
        let sol = solve(
            &x,
            &y,
            k,
            SmoParams {
                c: 10.0,
                ..params()
            },
        );
        assert!(sol.converged);
        let coef = sol.coefficients(&y);
        for (xi, &yi) in x.iter().zip(&y) {
            let f = decision(&x, &coef, sol.rho, k, xi);
            assert!(f * yi > 0.0, "f = {f} for label {yi}");
        }
        // Symmetric problem: every point is a support vector with equal weight.
        let a0 = sol.alpha[0];
        assert!(sol.alpha.iter().all(|a| (a - a0).abs() < 1e-6));
        assert!(sol.rho.abs() < 1e-9);
    }

    #[test]
    fn dual_constraints_hold() {
        let x: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()])
            .collect();
        let y: Vec<f64> = (0..12)
            .map(|i| if i % 3 == 0 { 1.0 } else { -1.0 })
            .collect();
        let sol = solve(&x, &y, RbfKernel { gamma: 0.5 }, params());
        assert!(sol.converged);
        let s: f64 = sol.alpha.iter().zip(&y).map(|(a, y)| a * y).sum();
        assert!(s.abs() < 1e-9);
        assert!(sol.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn two_point_problem_is_symmetric() {
        let x = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let y = vec![1.0, -1.0];
        let k = RbfKernel { gamma: 0.5 };
        let sol = solve(&x, &y, k, params());
        let coef = sol.coefficients(&y);
        let mid = decision(&x, &coef, sol.rho, k, &[0.0, 0.0]);
        assert!(mid.abs() < 1e-12);
        // Closed form: a = 2 / (K11 + K22 - 2 K12) = 2 / (2 - 2 e^-2), capped at C.
        let expected = (2.0 / (2.0 - 2.0 * (-2.0f64).exp())).min(1.0);
        assert!((sol.alpha[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn runs_in_single_precision() {
        let x = vec![
            vec![0.0f32, 0.0],
            vec![0.1, 0.0],
            vec![2.0, 2.0],
            vec![2.1, 2.0],
        ];
        let y = vec![-1.0f32, -1.0, 1.0, 1.0];
        let k = RbfKernel { gamma: 1.0f32 };
        let sol = solve(
            &x,
            &y,
            k,
            SmoParams {
                c: 1.0,
                tolerance: 1e-4,
                max_iterations: 10_000,
            },
        );
        let coef = sol.coefficients(&y);
        for (xi, &yi) in x.iter().zip(&y) {
            assert!(decision(&x, &coef, sol.rho, k, xi) * yi > 0.0);
        }
    }
}
