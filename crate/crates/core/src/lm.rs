//! Small dense Levenberg–Marquardt driver shared by calibration and pose
//! refinement.

use nalgebra::{DMatrix, DVector};

use crate::scalar::{eps, lit, Real};

/// A nonlinear least-squares problem over a state living on some manifold.
pub trait LeastSquares<T: Real> {
    type State: Clone;

    /// Stacked residual vector, or `None` when the state is outside the
    /// model's domain (e.g. a point ends up behind the camera).
    fn residuals(&self, state: &Self::State) -> Option<DVector<T>>;

    /// Jacobian of the residuals with respect to the local increment used by
    /// [`LeastSquares::retract`].
    fn jacobian(&self, state: &Self::State) -> Option<DMatrix<T>>;

    fn retract(&self, state: &Self::State, delta: &DVector<T>) -> Self::State;
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub relative_decrease_tol: f64,
    /// Give up increasing damping beyond this (the current state is then a
    /// stationary point to working precision).
    pub max_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_decrease_tol: 1e-12,
            max_damping: 1e12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmStatus {
    /// Cost decrease fell below the tolerance, or no further decrease exists.
    Converged,
    /// Iteration budget exhausted while still making progress.
    MaxIterations,
    /// Residuals could not be evaluated at the starting point or became
    /// non-finite.
    Failed,
}

#[derive(Debug, Clone)]
pub struct LmReport<T: Real> {
    pub status: LmStatus,
    pub iterations: usize,
    /// Sum of squared residuals at the start.
    pub initial_cost: T,
    pub final_cost: T,
    pub residual_count: usize,
}

impl<T: Real> LmReport<T> {
    pub fn initial_rms(&self) -> T {
        rms(self.initial_cost, self.residual_count)
    }

    pub fn final_rms(&self) -> T {
        rms(self.final_cost, self.residual_count)
    }
}

/// RMS of point reprojection errors given the summed squared residual and the
/// number of scalar residuals (two per point).
pub fn rms<T: Real>(cost: T, residual_count: usize) -> T {
    if residual_count == 0 {
        return T::zero();
    }
    (cost / lit::<T>((residual_count / 2).max(1) as f64)).sqrt()
}

/// Runs LM from `start`. The returned state is always the best iterate found.
pub fn minimize<T: Real, P: LeastSquares<T>>(
    problem: &P,
    start: P::State,
    opts: &LmOptions,
) -> (P::State, LmReport<T>) {
    let Some(r0) = problem.residuals(&start) else {
        return (
            start,
            LmReport {
                status: LmStatus::Failed,
                iterations: 0,
                initial_cost: T::max_value().unwrap(),
                final_cost: T::max_value().unwrap(),
                residual_count: 0,
            },
        );
    };
    let m = r0.len();
    let mut cost = r0.norm_squared();
    let initial_cost = cost;
    let mut state = start;
    let mut residual = r0;
    // Below this the residual is pure rounding noise.
    let floor = lit::<T>(m as f64) * (eps::<T>() * lit(1e4)).powi(2);
    let rel_tol = lit::<T>(opts.relative_decrease_tol).max(eps::<T>());
    let max_damping = lit::<T>(opts.max_damping);

    let mut status = LmStatus::MaxIterations;
    let mut iterations = 0;
    let mut damping: Option<T> = None;

    if !cost.is_finite() {
        status = LmStatus::Failed;
    } else if cost <= floor {
        status = LmStatus::Converged;
    } else {
        'outer: while iterations < opts.max_iterations {
            iterations += 1;
            let Some(jac) = problem.jacobian(&state) else {
                status = LmStatus::Failed;
                break;
            };
            let jt = jac.transpose();
            let jtj = &jt * &jac;
            let grad = &jt * &residual;
            let n = jtj.nrows();
            let max_diag = (0..n).map(|i| jtj[(i, i)]).fold(T::zero(), |a, b| a.max(b));
            let mut mu = damping.unwrap_or(max_diag * lit(1e-3));
            if mu <= T::zero() {
                mu = lit(1e-3);
            }
            loop {
                let mut a = jtj.clone();
                for i in 0..n {
                    let d = jtj[(i, i)].max(max_diag * lit(1e-12)).max(eps::<T>());
                    a[(i, i)] += mu * d;
                }
                let step = a.cholesky().map(|c| c.solve(&(-&grad)));
                if let Some(delta) = step {
                    let candidate = problem.retract(&state, &delta);
                    if let Some(r_new) = problem.residuals(&candidate) {
                        let new_cost = r_new.norm_squared();
                        if new_cost.is_finite() && new_cost < cost {
                            let decrease = cost - new_cost;
                            state = candidate;
                            residual = r_new;
                            let old = cost;
                            cost = new_cost;
                            damping = Some((mu * lit(0.3)).max(lit(1e-15)));
                            if decrease <= rel_tol * old || cost <= floor {
                                status = LmStatus::Converged;
                                break 'outer;
                            }
                            break;
                        }
                    }
                }
                mu *= lit(10.0);
                if mu > max_damping * max_diag.max(T::one()) {
                    // No descent direction left at working precision.
                    status = LmStatus::Converged;
                    break 'outer;
                }
            }
        }
    }
    (
        state,
        LmReport {
            status,
            iterations,
            initial_cost,
            final_cost: cost,
            residual_count: m,
        },
    )
}
