//! Dense Levenberg–Marquardt over a manifold-valued state.

use nalgebra::{DMatrix, DVector};

/// A nonlinear least-squares problem `min ½‖r(x)‖²`.
///
/// `apply` performs the retraction, so states can live on a manifold
/// (rotations are updated multiplicatively).
pub trait LeastSquares {
    type State: Clone;

    fn residuals(&self, state: &Self::State) -> DVector<f64>;
    fn jacobian(&self, state: &Self::State) -> DMatrix<f64>;
    fn apply(&self, state: &Self::State, delta: &DVector<f64>) -> Self::State;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iterations: usize,
    /// Stop when an accepted step changes the cost by less than this
    /// fraction.
    pub relative_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            initial_lambda: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            max_iterations: 200,
            relative_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, in order.
    pub accepted_costs: Vec<f64>,
    pub converged: bool,
}

const LAMBDA_CEILING: f64 = 1e16;

fn cost(r: &DVector<f64>) -> f64 {
    0.5 * r.norm_squared()
}

/// Runs LM from `initial`. Returns the final state whether or not the
/// convergence test fired; callers inspect [`LmReport::converged`].
pub fn minimize<P: LeastSquares>(problem: &P, initial: P::State, config: &LmConfig) -> (P::State, LmReport) {
    let mut state = initial;
    let mut r = problem.residuals(&state);
    let mut current = cost(&r);
    let mut report = LmReport {
        iterations: 0,
        initial_cost: current,
        final_cost: current,
        accepted_costs: Vec::new(),
        converged: false,
    };
    if !current.is_finite() {
        return (state, report);
    }
    let mut lambda = config.initial_lambda;
    let mut jac = problem.jacobian(&state);
    let mut jtj = jac.transpose() * &jac;
    let mut grad = jac.transpose() * &r;

    while report.iterations < config.max_iterations {
        if current == 0.0 || grad.amax() == 0.0 {
            report.converged = true;
            break;
        }
        report.iterations += 1;
        let mut damped = jtj.clone();
        let diag_floor = jtj.diagonal().amax() * 1e-15;
        for i in 0..damped.nrows() {
            damped[(i, i)] += lambda * jtj[(i, i)].max(diag_floor).max(f64::MIN_POSITIVE);
        }
        let step = damped.cholesky().map(|c| c.solve(&(-&grad)));
        let accepted = step.and_then(|delta| {
            let candidate = problem.apply(&state, &delta);
            let r_new = problem.residuals(&candidate);
            let c_new = cost(&r_new);
            (c_new.is_finite() && c_new < current).then_some((candidate, r_new, c_new))
        });
        match accepted {
            Some((candidate, r_new, c_new)) => {
                let rel = (current - c_new) / current;
                state = candidate;
                r = r_new;
                current = c_new;
                report.accepted_costs.push(c_new);
                lambda *= config.lambda_down;
                if rel < config.relative_tolerance {
                    report.converged = true;
                    break;
                }
                jac = problem.jacobian(&state);
                jtj = jac.transpose() * &jac;
                grad = jac.transpose() * &r;
            }
            None => {
                lambda *= config.lambda_up;
                if lambda > LAMBDA_CEILING {
                    // No descent direction left at machine precision.
                    report.converged = true;
                    break;
                }
            }
        }
    }
    report.final_cost = current;
    (state, report)
}
