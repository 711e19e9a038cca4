//! Horizon problem assembly: decision arrays, bounds, ACC/kinematic/dynamic
//! constraints, and the three objective variants (model-agnostic QP,
//! model-aware NLP, and the convexified SQP subproblem).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuel::{fuel_rate_hat, fuel_rate_hat_derivatives, FuelCoefficients};
use crate::sim::EgoState;
use crate::solver::ConvexQp;
use crate::vehicle::{ActuatorBounds, DerivedCoeffs};

/// Margin turning the strict ACC inequalities into closed ones. Sized to
/// absorb one replanning step of leading-prediction and jerk-clamp drift so
/// the executed gap never leaves the open window.
pub const ACC_MARGIN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("invalid horizon spec: {0}")]
    InvalidSpec(String),
    #[error("array length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("problem kind {0:?} has no convex QP form")]
    NotConvex(ProblemKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProblemKind {
    Qp,
    SqpSubproblem,
    Nlp,
}

/// Discretization, gap policy, weights and bounds shared by all builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSpec {
    /// Number of steps N_T; arrays have N_T + 1 elements.
    pub horizon_steps: usize,
    /// Timestep (s).
    pub dt: f64,
    /// Time headway t_h (s).
    pub time_headway: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub d_init: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub bounds: ActuatorBounds,
    pub use_slope_prediction: bool,
}

impl HorizonSpec {
    pub fn horizon_seconds(&self) -> f64 {
        self.horizon_steps as f64 * self.dt
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        if self.horizon_steps < 1 {
            return Err(OcpError::InvalidSpec("horizon_steps must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(OcpError::InvalidSpec("dt must be > 0".into()));
        }
        if !(0.0 < self.d_min && self.d_min < self.d_max) {
            return Err(OcpError::InvalidSpec("need 0 < d_min < d_max".into()));
        }
        if !(self.w1 > 0.0 && self.w2 > 0.0 && self.w3 >= 0.0) {
            return Err(OcpError::InvalidSpec("need w1, w2 > 0 and w3 >= 0".into()));
        }
        Ok(())
    }

    /// Lower bound for the apparent acceleration variable. Loose enough to
    /// cover full braking plus downhill coasting.
    pub fn a_lower(&self) -> f64 {
        -(self.bounds.b_max + 5.0)
    }
}

/// Structural summary of a built problem, for tests and debug dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemDescriptor {
    pub variables: Vec<String>,
    /// One-sided count: a double-sided gap window counts as 2.
    pub acc_constraints: usize,
    pub kinematic_equalities: usize,
    pub dynamic_equalities: usize,
    pub references_slope: bool,
}

/// A discretized horizon problem, ready for a solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonProblem {
    pub kind: ProblemKind,
    pub initial_state: EgoState,
    pub lead_s: Vec<f64>,
    pub lead_v: Vec<f64>,
    /// Predicted slope per step; empty for the QP kind.
    pub slope: Vec<f64>,
    /// SQP reference trajectory; empty otherwise.
    pub reference_v: Vec<f64>,
    pub reference_u: Vec<f64>,
    pub spec: HorizonSpec,
    pub coeffs: Option<DerivedCoeffs>,
    pub fuel: Option<FuelCoefficients>,
    pub descriptor: ProblemDescriptor,
}

/// Solved trajectory arrays with independently evaluated constraint slacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSolution {
    pub s: Vec<f64>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub objective: f64,
    pub max_acc_violation: f64,
    pub max_kinematic_residual: f64,
    pub max_dynamic_residual: f64,
    /// Raw primal/dual vectors of the convex form, kept for warm starts.
    #[serde(skip)]
    pub qp_x: Vec<f64>,
    #[serde(skip)]
    pub qp_y: Vec<f64>,
}

// ---------------------------------------------------------------------------
// constraint sets, doubling as the independent residual evaluator
// ---------------------------------------------------------------------------

/// Headway-adjusted gap S_l[i] - (S[i] + t_h V[i]) per step.
pub fn acc_gaps(lead_s: &[f64], s: &[f64], v: &[f64], time_headway: f64) -> Vec<f64> {
    lead_s
        .iter()
        .zip(s.iter().zip(v))
        .map(|(&sl, (&si, &vi))| sl - (si + time_headway * vi))
        .collect()
}

/// Window [lo, hi] on the headway-adjusted position g_i = s_i + t_h v_i
/// implementing d_min < gap < d_max with the closed-set margin.
pub fn build_acc_constraints(lead_s: &[f64], spec: &HorizonSpec) -> (Vec<f64>, Vec<f64>) {
    let lo: Vec<f64> = lead_s.iter().map(|&sl| sl - spec.d_max + ACC_MARGIN).collect();
    let hi: Vec<f64> = lead_s.iter().map(|&sl| sl - spec.d_min - ACC_MARGIN).collect();
    (lo, hi)
}

/// Residuals of the kinematic equalities, 2 per transition:
/// s[i+1] - s[i] - v[i] dt - a[i] dt^2 / 2 and v[i+1] - v[i] - a[i] dt.
pub fn kinematic_residuals(s: &[f64], v: &[f64], a: &[f64], dt: f64) -> Vec<f64> {
    let mut res = Vec::with_capacity(2 * (s.len() - 1));
    for i in 0..s.len() - 1 {
        res.push(s[i + 1] - s[i] - v[i] * dt - 0.5 * a[i] * dt * dt);
        res.push(v[i + 1] - v[i] - a[i] * dt);
    }
    res
}

/// Residuals of the dynamic equalities u[i] - a[i] - R(v[i], G[i]) - b[i].
pub fn dynamic_residuals(
    v: &[f64],
    u: &[f64],
    a: &[f64],
    b: &[f64],
    slope: &[f64],
    coeffs: &DerivedCoeffs,
) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let r = coeffs.k1 * v[i] * v[i]
                + coeffs.k2 * slope[i].cos()
                + coeffs.k3 * slope[i].sin();
            u[i] - a[i] - r - b[i]
        })
        .collect()
}

/// Worst ACC violation (m) of a trajectory against the gap window.
pub fn max_acc_violation(lead_s: &[f64], s: &[f64], v: &[f64], spec: &HorizonSpec) -> f64 {
    acc_gaps(lead_s, s, v, spec.time_headway)
        .iter()
        .map(|&gap| (spec.d_min - gap).max(gap - spec.d_max).max(0.0))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// variable layouts
// ---------------------------------------------------------------------------

// QP kind: [s, v, a] per step.
const QP_VARS: usize = 3;
fn qp_s(i: usize) -> usize {
    QP_VARS * i
}
fn qp_v(i: usize) -> usize {
    QP_VARS * i + 1
}
fn qp_a(i: usize) -> usize {
    QP_VARS * i + 2
}

// Full kind (SQP subproblem / NLP): [s, v, u, a, b] per step.
pub(crate) const FULL_VARS: usize = 5;
pub(crate) fn full_s(i: usize) -> usize {
    FULL_VARS * i
}
pub(crate) fn full_v(i: usize) -> usize {
    FULL_VARS * i + 1
}
pub(crate) fn full_u(i: usize) -> usize {
    FULL_VARS * i + 2
}
pub(crate) fn full_a(i: usize) -> usize {
    FULL_VARS * i + 3
}
pub(crate) fn full_b(i: usize) -> usize {
    FULL_VARS * i + 4
}

/// Row index of the linearized dynamics equality for step `i` in the full
/// kind. Layout: 2 init rows, then per step [acc, dyn, v, u, a, b] plus two
/// kinematic rows for every step but the last.
pub(crate) fn full_dyn_row(i: usize) -> usize {
    2 + 8 * i + 1
}

// ---------------------------------------------------------------------------
// builders
// ---------------------------------------------------------------------------

fn check_len(name: &str, len: usize, expected: usize) -> Result<(), OcpError> {
    if len != expected {
        return Err(OcpError::LengthMismatch {
            expected,
            got: len,
        });
    }
    let _ = name;
    Ok(())
}

/// Model-agnostic QP: velocity tracking plus acceleration smoothness under
/// ACC and kinematic constraints. Slope, traction and brake never appear.
pub fn build_qp(
    x0: &EgoState,
    lead_s: &[f64],
    lead_v: &[f64],
    spec: &HorizonSpec,
) -> Result<HorizonProblem, OcpError> {
    spec.validate()?;
    let n = spec.horizon_steps + 1;
    check_len("lead_s", lead_s.len(), n)?;
    check_len("lead_v", lead_v.len(), n)?;
    Ok(HorizonProblem {
        kind: ProblemKind::Qp,
        initial_state: *x0,
        lead_s: lead_s.to_vec(),
        lead_v: lead_v.to_vec(),
        slope: Vec::new(),
        reference_v: Vec::new(),
        reference_u: Vec::new(),
        spec: spec.clone(),
        coeffs: None,
        fuel: None,
        descriptor: ProblemDescriptor {
            variables: vec!["s".into(), "v".into(), "a".into()],
            acc_constraints: 2 * n,
            kinematic_equalities: 2 * spec.horizon_steps,
            dynamic_equalities: 0,
            references_slope: false,
        },
    })
}

/// Model-aware NLP: fuel objective over the exact nonlinear dynamics.
pub fn build_nlp(
    x0: &EgoState,
    lead_s: &[f64],
    lead_v: &[f64],
    slope: &[f64],
    coeffs: &DerivedCoeffs,
    fuel: &FuelCoefficients,
    spec: &HorizonSpec,
) -> Result<HorizonProblem, OcpError> {
    spec.validate()?;
    let n = spec.horizon_steps + 1;
    check_len("lead_s", lead_s.len(), n)?;
    check_len("lead_v", lead_v.len(), n)?;
    check_len("slope", slope.len(), n)?;
    Ok(HorizonProblem {
        kind: ProblemKind::Nlp,
        initial_state: *x0,
        lead_s: lead_s.to_vec(),
        lead_v: lead_v.to_vec(),
        slope: slope.to_vec(),
        reference_v: Vec::new(),
        reference_u: Vec::new(),
        spec: spec.clone(),
        coeffs: Some(*coeffs),
        fuel: Some(*fuel),
        descriptor: ProblemDescriptor {
            variables: vec!["s".into(), "v".into(), "u".into(), "a".into(), "b".into()],
            acc_constraints: 2 * n,
            kinematic_equalities: 2 * spec.horizon_steps,
            dynamic_equalities: n,
            references_slope: true,
        },
    })
}

/// Convex SQP subproblem: fuel objective Taylor-expanded around the
/// reference (V, U) trajectory with a PSD-projected Hessian, and the
/// resistance term linearized around the reference speed.
#[allow(clippy::too_many_arguments)]
pub fn build_sqp_subproblem(
    x0: &EgoState,
    lead_s: &[f64],
    lead_v: &[f64],
    slope: &[f64],
    coeffs: &DerivedCoeffs,
    fuel: &FuelCoefficients,
    reference_v: &[f64],
    reference_u: &[f64],
    spec: &HorizonSpec,
) -> Result<HorizonProblem, OcpError> {
    let mut problem = build_nlp(x0, lead_s, lead_v, slope, coeffs, fuel, spec)?;
    let n = spec.horizon_steps + 1;
    check_len("reference_v", reference_v.len(), n)?;
    check_len("reference_u", reference_u.len(), n)?;
    problem.kind = ProblemKind::SqpSubproblem;
    problem.reference_v = reference_v.to_vec();
    problem.reference_u = reference_u.to_vec();
    Ok(problem)
}

/// Project the symmetric 2x2 matrix [[a, b], [b, 0]] onto its PSD part by
/// clipping negative eigenvalues at zero.
fn psd_project(a: f64, b: f64) -> [[f64; 2]; 2] {
    if b == 0.0 {
        return [[a.max(0.0), 0.0], [0.0, 0.0]];
    }
    let lambda_plus = 0.5 * (a + (a * a + 4.0 * b * b).sqrt());
    // eigenvector (b, lambda_plus - a), normalized
    let (ex, ey) = (b, lambda_plus - a);
    let norm2 = ex * ex + ey * ey;
    let scale = lambda_plus / norm2;
    [
        [scale * ex * ex, scale * ex * ey],
        [scale * ex * ey, scale * ey * ey],
    ]
}

impl HorizonProblem {
    /// Materialize the convex QP form. Only the QP and SQP-subproblem kinds
    /// are convex; the NLP kind must go through the NLP solver.
    pub fn to_convex_qp(&self) -> Result<ConvexQp, OcpError> {
        match self.kind {
            ProblemKind::Qp => Ok(self.assemble_qp_kind()),
            ProblemKind::SqpSubproblem => Ok(self.assemble_sqp_kind()),
            ProblemKind::Nlp => Err(OcpError::NotConvex(self.kind)),
        }
    }

    fn assemble_qp_kind(&self) -> ConvexQp {
        let spec = &self.spec;
        let nt = spec.horizon_steps;
        let steps = nt + 1;
        let n = QP_VARS * steps;
        let dt = spec.dt;

        let mut p_upper = Vec::new();
        let mut q = vec![0.0; n];
        let mut obj_const = 0.0;
        for i in 0..steps {
            // w1 (v - V_l)^2 + w2 a^2
            p_upper.push((qp_v(i), qp_v(i), 2.0 * spec.w1));
            p_upper.push((qp_a(i), qp_a(i), 2.0 * spec.w2));
            q[qp_v(i)] = -2.0 * spec.w1 * self.lead_v[i];
            obj_const += spec.w1 * self.lead_v[i] * self.lead_v[i];
        }

        let mut a = Vec::new();
        let mut l = Vec::new();
        let mut u = Vec::new();
        let mut con_step = Vec::new();
        let mut row = 0usize;
        let mut push_row = |entries: &[(usize, f64)],
                            lo: f64,
                            hi: f64,
                            step: usize,
                            a: &mut Vec<(usize, usize, f64)>,
                            l: &mut Vec<f64>,
                            u: &mut Vec<f64>,
                            con_step: &mut Vec<usize>| {
            for &(col, val) in entries {
                a.push((row, col, val));
            }
            l.push(lo);
            u.push(hi);
            con_step.push(step);
            row += 1;
        };

        // initial state pins
        push_row(&[(qp_s(0), 1.0)], self.initial_state.s, self.initial_state.s, 0, &mut a, &mut l, &mut u, &mut con_step);
        push_row(&[(qp_v(0), 1.0)], self.initial_state.v, self.initial_state.v, 0, &mut a, &mut l, &mut u, &mut con_step);

        let (mut acc_lo, mut acc_hi) = build_acc_constraints(&self.lead_s, spec);
        // the pinned initial state must stay feasible even if it has drifted
        let g0 = self.initial_state.s + spec.time_headway * self.initial_state.v;
        acc_lo[0] = acc_lo[0].min(g0);
        acc_hi[0] = acc_hi[0].max(g0);
        for i in 0..steps {
            push_row(
                &[(qp_s(i), 1.0), (qp_v(i), spec.time_headway)],
                acc_lo[i],
                acc_hi[i],
                i,
                &mut a, &mut l, &mut u, &mut con_step,
            );
            let (v_lo, v_hi) = if i == 0 {
                (self.initial_state.v.min(0.0), self.initial_state.v.max(spec.bounds.v_max))
            } else {
                (0.0, spec.bounds.v_max)
            };
            push_row(&[(qp_v(i), 1.0)], v_lo, v_hi, i, &mut a, &mut l, &mut u, &mut con_step);
            push_row(
                &[(qp_a(i), 1.0)],
                -spec.bounds.b_max,
                spec.bounds.a_v_max,
                i,
                &mut a, &mut l, &mut u, &mut con_step,
            );
            if i < nt {
                push_row(
                    &[(qp_s(i + 1), 1.0), (qp_s(i), -1.0), (qp_v(i), -dt), (qp_a(i), -0.5 * dt * dt)],
                    0.0,
                    0.0,
                    i + 1,
                    &mut a, &mut l, &mut u, &mut con_step,
                );
                push_row(
                    &[(qp_v(i + 1), 1.0), (qp_v(i), -1.0), (qp_a(i), -dt)],
                    0.0,
                    0.0,
                    i + 1,
                    &mut a, &mut l, &mut u, &mut con_step,
                );
            }
        }

        let m = l.len();
        let var_step: Vec<usize> = (0..n).map(|idx| idx / QP_VARS).collect();
        ConvexQp {
            n,
            m,
            p_upper,
            q,
            obj_const,
            a,
            l,
            u,
            var_step,
            con_step,
        }
    }

    fn assemble_sqp_kind(&self) -> ConvexQp {
        let spec = &self.spec;
        let coeffs = self.coeffs.expect("sqp subproblem has coeffs");
        let fuel = self.fuel.expect("sqp subproblem has fuel model");
        let nt = spec.horizon_steps;
        let steps = nt + 1;
        let n = FULL_VARS * steps;
        let dt = spec.dt;

        let mut p_upper = Vec::new();
        let mut q = vec![0.0; n];
        let mut obj_const = 0.0;
        for i in 0..steps {
            p_upper.push((full_v(i), full_v(i), 2.0 * spec.w1));
            p_upper.push((full_a(i), full_a(i), 2.0 * spec.w2));
            p_upper.push((full_b(i), full_b(i), 2.0 * spec.w2));
            q[full_v(i)] += -2.0 * spec.w1 * self.lead_v[i];
            obj_const += spec.w1 * self.lead_v[i] * self.lead_v[i];

            if spec.w3 > 0.0 {
                // second-order fuel expansion at the reference, PSD projected
                let (rv, ru) = (self.reference_v[i], self.reference_u[i]);
                let f0 = fuel_rate_hat(rv, ru, &fuel);
                let d = fuel_rate_hat_derivatives(rv, ru, &fuel);
                let h = psd_project(d.d2f_dv2, d.d2f_dvdu);
                let w3 = spec.w3;
                if h[0][0] != 0.0 {
                    p_upper.push((full_v(i), full_v(i), w3 * h[0][0]));
                }
                if h[0][1] != 0.0 {
                    p_upper.push((full_v(i), full_u(i), w3 * h[0][1]));
                }
                if h[1][1] != 0.0 {
                    p_upper.push((full_u(i), full_u(i), w3 * h[1][1]));
                }
                // gradient and value terms keeping F~(ref) = F(ref) exact
                let gx = d.df_dv - (h[0][0] * rv + h[0][1] * ru);
                let gy = d.df_du - (h[0][1] * rv + h[1][1] * ru);
                q[full_v(i)] += w3 * gx;
                q[full_u(i)] += w3 * gy;
                obj_const += w3
                    * (f0 - d.df_dv * rv - d.df_du * ru
                        + 0.5 * (h[0][0] * rv * rv + 2.0 * h[0][1] * rv * ru + h[1][1] * ru * ru));
            }
        }

        let mut a = Vec::new();
        let mut l = Vec::new();
        let mut u = Vec::new();
        let mut con_step = Vec::new();
        let mut row = 0usize;
        let mut push_row = |entries: &[(usize, f64)],
                            lo: f64,
                            hi: f64,
                            step: usize,
                            a: &mut Vec<(usize, usize, f64)>,
                            l: &mut Vec<f64>,
                            u: &mut Vec<f64>,
                            con_step: &mut Vec<usize>| {
            for &(col, val) in entries {
                a.push((row, col, val));
            }
            l.push(lo);
            u.push(hi);
            con_step.push(step);
            row += 1;
        };

        push_row(&[(full_s(0), 1.0)], self.initial_state.s, self.initial_state.s, 0, &mut a, &mut l, &mut u, &mut con_step);
        push_row(&[(full_v(0), 1.0)], self.initial_state.v, self.initial_state.v, 0, &mut a, &mut l, &mut u, &mut con_step);

        let (mut acc_lo, mut acc_hi) = build_acc_constraints(&self.lead_s, spec);
        let g0 = self.initial_state.s + spec.time_headway * self.initial_state.v;
        acc_lo[0] = acc_lo[0].min(g0);
        acc_hi[0] = acc_hi[0].max(g0);
        for i in 0..steps {
            push_row(
                &[(full_s(i), 1.0), (full_v(i), spec.time_headway)],
                acc_lo[i],
                acc_hi[i],
                i,
                &mut a, &mut l, &mut u, &mut con_step,
            );
            // linearized dynamics:
            // u - a - b - 2 k1 Vref v = k2 cos G + k3 sin G - k1 Vref^2
            let rv = self.reference_v[i];
            let rhs = coeffs.k2 * self.slope[i].cos() + coeffs.k3 * self.slope[i].sin()
                - coeffs.k1 * rv * rv;
            push_row(
                &[
                    (full_u(i), 1.0),
                    (full_a(i), -1.0),
                    (full_b(i), -1.0),
                    (full_v(i), -2.0 * coeffs.k1 * rv),
                ],
                rhs,
                rhs,
                i,
                &mut a, &mut l, &mut u, &mut con_step,
            );
            let (v_lo, v_hi) = if i == 0 {
                (self.initial_state.v.min(0.0), self.initial_state.v.max(spec.bounds.v_max))
            } else {
                (0.0, spec.bounds.v_max)
            };
            push_row(&[(full_v(i), 1.0)], v_lo, v_hi, i, &mut a, &mut l, &mut u, &mut con_step);
            push_row(&[(full_u(i), 1.0)], 0.0, spec.bounds.u_max, i, &mut a, &mut l, &mut u, &mut con_step);
            push_row(&[(full_a(i), 1.0)], spec.a_lower(), spec.bounds.a_v_max, i, &mut a, &mut l, &mut u, &mut con_step);
            push_row(&[(full_b(i), 1.0)], 0.0, spec.bounds.b_max, i, &mut a, &mut l, &mut u, &mut con_step);
            if i < nt {
                push_row(
                    &[(full_s(i + 1), 1.0), (full_s(i), -1.0), (full_v(i), -dt), (full_a(i), -0.5 * dt * dt)],
                    0.0,
                    0.0,
                    i + 1,
                    &mut a, &mut l, &mut u, &mut con_step,
                );
                push_row(
                    &[(full_v(i + 1), 1.0), (full_v(i), -1.0), (full_a(i), -dt)],
                    0.0,
                    0.0,
                    i + 1,
                    &mut a, &mut l, &mut u, &mut con_step,
                );
            }
        }

        let m = l.len();
        let var_step: Vec<usize> = (0..n).map(|idx| idx / FULL_VARS).collect();
        ConvexQp {
            n,
            m,
            p_upper,
            q,
            obj_const,
            a,
            l,
            u,
            var_step,
            con_step,
        }
    }

    /// Extract trajectory arrays from a convex-form primal vector and attach
    /// independently evaluated constraint slacks.
    pub fn solution_from_qp(&self, x: &[f64], y: &[f64], objective: f64) -> HorizonSolution {
        let steps = self.spec.horizon_steps + 1;
        let (s, v, u, a, b) = match self.kind {
            ProblemKind::Qp => {
                let s: Vec<f64> = (0..steps).map(|i| x[qp_s(i)]).collect();
                let v: Vec<f64> = (0..steps).map(|i| x[qp_v(i)]).collect();
                let a: Vec<f64> = (0..steps).map(|i| x[qp_a(i)]).collect();
                (s, v, vec![0.0; steps], a, vec![0.0; steps])
            }
            _ => {
                let s: Vec<f64> = (0..steps).map(|i| x[full_s(i)]).collect();
                let v: Vec<f64> = (0..steps).map(|i| x[full_v(i)]).collect();
                let u: Vec<f64> = (0..steps).map(|i| x[full_u(i)]).collect();
                let a: Vec<f64> = (0..steps).map(|i| x[full_a(i)]).collect();
                let b: Vec<f64> = (0..steps).map(|i| x[full_b(i)]).collect();
                (s, v, u, a, b)
            }
        };
        let max_acc = max_acc_violation(&self.lead_s, &s, &v, &self.spec);
        let max_kin = kinematic_residuals(&s, &v, &a, self.spec.dt)
            .iter()
            .fold(0.0f64, |acc, r| acc.max(r.abs()));
        let max_dyn = match (self.kind, self.coeffs) {
            (ProblemKind::Qp, _) | (_, None) => 0.0,
            (_, Some(coeffs)) => dynamic_residuals(&v, &u, &a, &b, &self.slope, &coeffs)
                .iter()
                .fold(0.0f64, |acc, r| acc.max(r.abs())),
        };
        HorizonSolution {
            s,
            v,
            u,
            a,
            b,
            objective,
            max_acc_violation: max_acc,
            max_kinematic_residual: max_kin,
            max_dynamic_residual: max_dyn,
            qp_x: x.to_vec(),
            qp_y: y.to_vec(),
        }
    }

    /// Exact objective of the nonlinear problem at given arrays.
    pub fn nlp_objective(&self, v: &[f64], u: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let spec = &self.spec;
        let fuel = self.fuel.expect("nlp objective needs a fuel model");
        let mut j = 0.0;
        for i in 0..v.len() {
            let dv = self.lead_v[i] - v[i];
            j += spec.w1 * dv * dv + spec.w2 * a[i] * a[i] + spec.w2 * b[i] * b[i];
            j += spec.w3 * fuel_rate_hat(v[i], u[i], &fuel);
        }
        j
    }

    /// Serialize the convex form (matrices in triplet form) for offline
    /// inspection.
    pub fn debug_dump_json(&self) -> String {
        match self.to_convex_qp() {
            Ok(qp) => serde_json::to_string_pretty(&qp).expect("serializable"),
            Err(_) => serde_json::to_string_pretty(&self).expect("serializable"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::solver::{admm, oracle, SolverConfig};
    use approx::assert_relative_eq;

    fn spec(nt: usize, w: presets::MethodWeights) -> HorizonSpec {
        HorizonSpec {
            horizon_steps: nt,
            dt: 0.1,
            time_headway: presets::TIME_HEADWAY,
            d_min: w.d_min,
            d_max: w.d_max,
            d_init: presets::D_INIT,
            w1: w.w1,
            w2: w.w2,
            w3: w.w3,
            bounds: presets::truck_params().bounds,
            use_slope_prediction: true,
        }
    }

    fn ego(s: f64, v: f64) -> EgoState {
        EgoState {
            s,
            v,
            u: 0.0,
            a_v: 0.0,
            a_b: 0.0,
        }
    }

    #[test]
    fn acc_gap_evaluation() {
        let gaps = acc_gaps(&[100.0], &[60.0], &[10.0], 1.5);
        assert_relative_eq!(gaps[0], 25.0);
        // feasible for d_min = 10, d_max = 100
        assert!(gaps[0] > 10.0 && gaps[0] < 100.0);
    }

    #[test]
    fn acc_window_boundary() {
        let sp = spec(1, presets::qp_weights());
        let (lo, hi) = build_acc_constraints(&[100.0, 101.0], &sp);
        // g exactly at S_l - d_min is outside the closed window by the margin
        let g = 100.0 - sp.d_min;
        assert!(g > hi[0]);
        assert!(lo[1] < hi[1]);
    }

    #[test]
    fn acc_violated_when_gap_exceeds_d_max() {
        let sp = spec(1, presets::qp_weights());
        let v = max_acc_violation(&[200.0, 200.0], &[0.0, 0.0], &[0.0, 0.0], &sp);
        assert!(v > 0.0);
    }

    #[test]
    fn kinematic_one_step() {
        // V[0]=10, A[0]=1, dt=0.1 -> S[1]-S[0] = 1.005, V[1] = 10.1
        let res = kinematic_residuals(&[0.0, 1.005], &[10.0, 10.1], &[1.0, 0.0], 0.1);
        assert!(res.iter().all(|r| r.abs() < 1e-12));

        // A = 0 keeps V constant, S linear
        let res = kinematic_residuals(&[0.0, 1.0, 2.0], &[10.0, 10.0, 10.0], &[0.0; 3], 0.1);
        assert!(res.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn dynamic_residual_cases() {
        let truck = presets::truck_params().derived_coeffs();
        // flat road, V=0, B=0: U = A + k2
        let res = dynamic_residuals(&[0.0], &[0.5 + truck.k2], &[0.5], &[0.0], &[0.0], &truck);
        assert!(res[0].abs() < 1e-12);

        // truck at V=20, G=0.02, A=0, B=0 -> U ~ 0.32904
        let res = dynamic_residuals(&[20.0], &[0.3290351], &[0.0], &[0.0], &[0.02], &truck);
        assert!(res[0].abs() < 1e-4);

        // braking to balance: A = -R, B = 0 -> U = 0
        let r = truck.k1 * 225.0 + truck.k2;
        let res = dynamic_residuals(&[15.0], &[0.0], &[-r], &[0.0], &[0.0], &truck);
        assert!(res[0].abs() < 1e-12);
    }

    #[test]
    fn qp_structure_has_no_slope_or_traction() {
        let sp = spec(5, presets::qp_weights());
        let lead: Vec<f64> = (0..=5).map(|i| 60.0 + i as f64).collect();
        let lead_v = vec![10.0; 6];
        let p = build_qp(&ego(0.0, 10.0), &lead, &lead_v, &sp).unwrap();
        assert!(!p.descriptor.references_slope);
        assert!(!p.descriptor.variables.iter().any(|v| v == "u" || v == "b"));
        assert!(p.slope.is_empty());
        assert_eq!(p.descriptor.acc_constraints, 2 * 6);
        assert_eq!(p.descriptor.kinematic_equalities, 10);
        assert_eq!(p.descriptor.dynamic_equalities, 0);
    }

    #[test]
    fn constraint_counts_full_kind() {
        let sp = spec(5, presets::nlp_weights());
        let truck = presets::truck_params().derived_coeffs();
        let fuel = presets::truck_fuel_coefficients();
        let lead: Vec<f64> = (0..=5).map(|i| 60.0 + i as f64).collect();
        let p = build_nlp(&ego(0.0, 10.0), &lead, &vec![10.0; 6], &vec![0.0; 6], &truck, &fuel, &sp)
            .unwrap();
        assert_eq!(p.descriptor.acc_constraints, 12);
        assert_eq!(p.descriptor.kinematic_equalities, 10);
        assert_eq!(p.descriptor.dynamic_equalities, 6);
    }

    #[test]
    fn qp_steady_state_gives_zero_accel() {
        let sp = spec(10, presets::qp_weights());
        let v0 = 15.0;
        let lead: Vec<f64> = (0..=10).map(|i| 50.0 + v0 * 0.1 * i as f64).collect();
        let lead_v = vec![v0; 11];
        let p = build_qp(&ego(0.0, v0), &lead, &lead_v, &sp).unwrap();
        let qp = p.to_convex_qp().unwrap();
        let (sol, diag) = admm::solve_qp(&qp, None, &SolverConfig::default());
        assert_eq!(diag.status, crate::solver::SolveStatus::Optimal);
        let hs = p.solution_from_qp(&sol.x, &sol.y, sol.objective);
        assert!(hs.a.iter().all(|&a| a.abs() < 1e-5), "a = {:?}", hs.a);
        assert!(hs.objective.abs() < 1e-6);
    }

    #[test]
    fn qp_accelerates_toward_tracking_bounded_by_a_v_max() {
        let sp = spec(10, presets::qp_weights());
        // leading far ahead near d_max and faster
        let lead: Vec<f64> = (0..=10).map(|i| 95.0 + 15.0 * 0.1 * i as f64).collect();
        let lead_v = vec![15.0; 11];
        let p = build_qp(&ego(0.0, 5.0), &lead, &lead_v, &sp).unwrap();
        let qp = p.to_convex_qp().unwrap();
        let (sol, diag) = admm::solve_qp(&qp, None, &SolverConfig::default());
        assert_eq!(diag.status, crate::solver::SolveStatus::Optimal);
        let hs = p.solution_from_qp(&sol.x, &sol.y, sol.objective);
        // smoothness weight caps the optimal ramp near 0.25 here
        assert!(hs.a[0] > 0.2, "a[0] = {}", hs.a[0]);
        assert!(hs.a.iter().all(|&a| a <= 2.0 + 1e-7));
    }

    #[test]
    fn qp_tiny_instance_matches_dense_oracle() {
        let sp = spec(2, presets::qp_weights());
        let lead = vec![50.0, 51.0, 52.0];
        let lead_v = vec![10.0, 10.0, 10.0];
        let p = build_qp(&ego(0.0, 12.0), &lead, &lead_v, &sp).unwrap();
        let qp = p.to_convex_qp().unwrap();
        let (sol, _) = admm::solve_qp(&qp, None, &SolverConfig::default());
        let reference = oracle::solve_dense_reference(&qp, 1e-10).unwrap();
        assert_relative_eq!(sol.objective, reference.objective, max_relative = 1e-6);
        for (a, b) in sol.x.iter().zip(&reference.x) {
            assert_relative_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn nlp_fuel_floor_constant_term() {
        let sp = spec(4, presets::nlp_weights());
        let truck = presets::truck_params().derived_coeffs();
        let fuel = presets::truck_fuel_coefficients();
        let lead = vec![50.0; 5];
        let p = build_nlp(&ego(0.0, 0.0), &lead, &vec![0.0; 5], &vec![0.0; 5], &truck, &fuel, &sp)
            .unwrap();
        let zeros = vec![0.0; 5];
        let j = p.nlp_objective(&zeros, &zeros, &zeros, &zeros);
        // V = 0, U = 0 leaves only the constant fuel floor
        assert_relative_eq!(j, 5.0 * sp.w3 * fuel.o0, epsilon = 1e-12);
    }

    #[test]
    fn sqp_expansion_anchors_at_reference() {
        let truck = presets::truck_params().derived_coeffs();
        let fuel = presets::truck_fuel_coefficients();
        // isolate the fuel term; both steps share the same reference point
        let mut sp = spec(1, presets::nlp_weights());
        sp.w1 = 1e-12;
        sp.w2 = 1e-12;
        sp.w3 = 1.0;
        let (rv, ru) = (12.0, 0.7);
        let lead = vec![1000.0, 1001.0];
        let p = build_sqp_subproblem(
            &ego(0.0, rv),
            &lead,
            &[0.0, 0.0],
            &[0.0, 0.0],
            &truck,
            &fuel,
            &[rv, rv],
            &[ru, ru],
            &sp,
        )
        .unwrap();
        let qp = p.to_convex_qp().unwrap();
        let eval = |v: f64, u: f64| {
            let mut x = vec![0.0; qp.n];
            for i in 0..2 {
                x[full_v(i)] = v;
                x[full_u(i)] = u;
            }
            qp.objective(&x)
        };
        // value anchor (two identical steps)
        assert_relative_eq!(
            eval(rv, ru),
            2.0 * fuel_rate_hat(rv, ru, &fuel),
            max_relative = 1e-9
        );
        // first-derivative anchor via finite differences of the model
        let h = 1e-6;
        let d = fuel_rate_hat_derivatives(rv, ru, &fuel);
        let grad_v = (eval(rv + h, ru) - eval(rv - h, ru)) / (2.0 * h);
        let grad_u = (eval(rv, ru + h) - eval(rv, ru - h)) / (2.0 * h);
        assert_relative_eq!(grad_v, 2.0 * d.df_dv, max_relative = 1e-4, epsilon = 1e-6);
        assert_relative_eq!(grad_u, 2.0 * d.df_du, max_relative = 1e-4, epsilon = 1e-6);
    }

    #[test]
    fn linearized_resistance_error_is_quadratic() {
        let truck = presets::truck_params().derived_coeffs();
        let rv = 14.0;
        let g: f64 = 0.01;
        let exact = |v: f64| truck.k1 * v * v + truck.k2 * g.cos() + truck.k3 * g.sin();
        let linear =
            |v: f64| truck.k1 * (rv * rv + 2.0 * rv * (v - rv)) + truck.k2 * g.cos() + truck.k3 * g.sin();
        assert_relative_eq!(linear(rv), exact(rv), epsilon = 1e-15);
        for delta in [0.1, 0.5, 1.0, -0.7] {
            let err = exact(rv + delta) - linear(rv + delta);
            assert_relative_eq!(err, truck.k1 * delta * delta, epsilon = 1e-12);
        }
    }

    #[test]
    fn psd_projection_properties() {
        for (a, b) in [(1.0, 0.5), (-2.0, 0.3), (0.0, 1.0), (3.0, 0.0), (-1.0, 0.0)] {
            let h = psd_project(a, b);
            // symmetric
            assert_relative_eq!(h[0][1], h[1][0]);
            // PSD: trace and determinant nonnegative
            let trace = h[0][0] + h[1][1];
            let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
            assert!(trace >= -1e-12);
            assert!(det >= -1e-12);
            // projection is exact when already PSD (b = 0, a >= 0)
            if b == 0.0 && a >= 0.0 {
                assert_relative_eq!(h[0][0], a);
            }
        }
    }

    #[test]
    fn objective_scales_with_weights() {
        let sp1 = spec(4, presets::qp_weights());
        let mut sp2 = sp1.clone();
        sp2.w1 *= 2.0;
        sp2.w2 *= 2.0;
        let lead: Vec<f64> = (0..=4).map(|i| 60.0 + i as f64).collect();
        let lead_v = vec![10.0; 5];
        let x0 = ego(0.0, 12.0);
        let p1 = build_qp(&x0, &lead, &lead_v, &sp1).unwrap().to_convex_qp().unwrap();
        let p2 = build_qp(&x0, &lead, &lead_v, &sp2).unwrap().to_convex_qp().unwrap();
        // fixed feasible point: value doubles
        let mut x = vec![0.0; p1.n];
        for i in 0..=4 {
            x[qp_s(i)] = 1.0 + i as f64;
            x[qp_v(i)] = 11.0;
            x[qp_a(i)] = 0.3;
        }
        assert_relative_eq!(2.0 * p1.objective(&x), p2.objective(&x), max_relative = 1e-12);
        // argmin unchanged
        let (s1, _) = admm::solve_qp(&p1, None, &SolverConfig::default());
        let (s2, _) = admm::solve_qp(&p2, None, &SolverConfig::default());
        for (a, b) in s1.x.iter().zip(&s2.x) {
            assert_relative_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn debug_dump_is_json() {
        let sp = spec(2, presets::qp_weights());
        let lead = vec![50.0, 51.0, 52.0];
        let p = build_qp(&ego(0.0, 10.0), &lead, &vec![10.0; 3], &sp).unwrap();
        let dump = p.debug_dump_json();
        let parsed: serde_json::Value = serde_json::from_str(&dump).unwrap();
        assert!(parsed.get("p_upper").is_some());
    }
}
