//! Numerical backends: an operator-splitting convex QP solver exploiting the
//! banded horizon structure, an SQP driver iterating convexified
//! subproblems, and a direct NLP solver with an exact-KKT certificate.
//! A dense interior-point reference implementation lives in [`oracle`] and
//! is used only as an independent test oracle.

pub mod admm;
pub mod band;
pub mod nlp;
pub mod oracle;
pub mod sqp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("problem is primal infeasible (most violated constraint {0})")]
    Infeasible(usize),
    #[error("iteration limit reached before convergence")]
    MaxIterations,
    #[error("time limit reached before convergence")]
    TimeLimit,
    #[error("problem kind {0} not supported by this solver")]
    WrongKind(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Constraint violation tolerance (scaled, absolute).
    pub feasibility_tolerance: f64,
    /// KKT stationarity tolerance.
    pub optimality_tolerance: f64,
    /// SQP outer-loop step tolerance on |dV|_inf + |dU|_inf.
    pub sqp_step_tolerance: f64,
    pub sqp_max_outer_iterations: usize,
    /// Halve the reference step whenever the exact-dynamics residual grows.
    /// Off reproduces the plain reference-update iteration.
    pub sqp_damping: bool,
    /// Optional wall-clock budget (ms).
    pub time_limit_ms: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 4000,
            feasibility_tolerance: 1e-6,
            optimality_tolerance: 1e-6,
            sqp_step_tolerance: 1e-4,
            sqp_max_outer_iterations: 20,
            sqp_damping: true,
            time_limit_ms: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    Infeasible,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub wall_time_ms: f64,
    /// Index of the most violated constraint when not optimal.
    pub most_violated_constraint: Option<usize>,
    /// Exact nonlinear dynamics residual, reported by SQP/NLP drivers.
    pub exact_dynamics_residual: Option<f64>,
}

/// A convex QP in the form
/// `min 1/2 x' P x + q' x + c  s.t.  l <= A x <= u`,
/// with per-variable and per-constraint step indices that expose the horizon
/// block structure to the banded KKT factorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexQp {
    pub n: usize,
    pub m: usize,
    /// Upper-triangle triplets (i <= j) of P.
    pub p_upper: Vec<(usize, usize, f64)>,
    pub q: Vec<f64>,
    /// Constant objective term, so reported objectives equal the modeled cost.
    pub obj_const: f64,
    /// Row, col, value triplets of A.
    pub a: Vec<(usize, usize, f64)>,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
    /// Horizon step owning each variable.
    pub var_step: Vec<usize>,
    /// Horizon step owning each constraint row.
    pub con_step: Vec<usize>,
}

impl ConvexQp {
    pub fn is_equality(&self, row: usize) -> bool {
        self.l[row] == self.u[row]
    }

    /// Objective value at `x`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut quad = 0.0;
        for &(i, j, v) in &self.p_upper {
            if i == j {
                quad += 0.5 * v * x[i] * x[i];
            } else {
                quad += v * x[i] * x[j];
            }
        }
        let lin: f64 = self.q.iter().zip(x).map(|(qi, xi)| qi * xi).sum();
        quad + lin + self.obj_const
    }

    /// y = A x.
    pub fn a_mul(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for &(r, c, v) in &self.a {
            out[r] += v * x[c];
        }
    }

    /// out = A' y.
    pub fn at_mul(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for &(r, c, v) in &self.a {
            out[c] += v * y[r];
        }
    }

    /// out = P x (full symmetric product from the upper triangle).
    pub fn p_mul(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for &(i, j, v) in &self.p_upper {
            out[i] += v * x[j];
            if i != j {
                out[j] += v * x[i];
            }
        }
    }

    /// Worst constraint violation of `ax = A x` against [l, u], as
    /// (row, amount).
    pub fn worst_violation(&self, ax: &[f64]) -> (usize, f64) {
        let mut worst = (0usize, 0.0f64);
        for i in 0..self.m {
            let v = (self.l[i] - ax[i]).max(ax[i] - self.u[i]).max(0.0);
            if v > worst.1 {
                worst = (i, v);
            }
        }
        worst
    }
}

/// Primal/dual solution of a [`ConvexQp`].
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Dual variables for the rows of A (positive at upper bounds).
    pub y: Vec<f64>,
    pub objective: f64,
}
