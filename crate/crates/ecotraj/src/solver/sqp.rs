//! Sequential convexification driver: repeatedly solves the convex
//! subproblem linearized around a reference trajectory, updating the
//! reference from the subproblem solution until the update stalls.

use std::time::Instant;

use crate::ocp::{build_sqp_subproblem, dynamic_residuals, HorizonProblem, HorizonSolution, ProblemKind};

use super::{admm, SolveDiagnostics, SolveError, SolveStatus, SolverConfig};

/// Constant-speed rollout used as the default reference: hold the initial
/// speed and pick the traction that balances resistance on the predicted
/// slope, clipped to the actuator range.
pub fn default_reference(problem: &HorizonProblem) -> (Vec<f64>, Vec<f64>) {
    let coeffs = problem.coeffs.expect("model-aware problem has coefficients");
    let v0 = problem.initial_state.v.clamp(0.0, problem.spec.bounds.v_max);
    let steps = problem.spec.horizon_steps + 1;
    let v = vec![v0; steps];
    let u: Vec<f64> = (0..steps)
        .map(|i| {
            let g = problem.slope[i];
            let r = coeffs.k1 * v0 * v0 + coeffs.k2 * g.cos() + coeffs.k3 * g.sin();
            r.clamp(0.0, problem.spec.bounds.u_max)
        })
        .collect();
    (v, u)
}

fn exact_dyn_residual_inf(problem: &HorizonProblem, sol: &HorizonSolution) -> f64 {
    let coeffs = problem.coeffs.expect("model-aware problem has coefficients");
    dynamic_residuals(&sol.v, &sol.u, &sol.a, &sol.b, &problem.slope, &coeffs)
        .iter()
        .fold(0.0f64, |acc, r| acc.max(r.abs()))
}

/// Solve the nonlinear horizon problem by reference-update SQP. The returned
/// trajectory is the last subproblem solution; its exact-dynamics defect is
/// reported in the diagnostics.
pub fn solve_sqp(
    problem: &HorizonProblem,
    config: &SolverConfig,
) -> Result<(HorizonSolution, SolveDiagnostics), SolveError> {
    if problem.kind != ProblemKind::Nlp {
        return Err(SolveError::WrongKind("solve_sqp expects the nonlinear kind"));
    }
    let start = Instant::now();
    let coeffs = problem.coeffs.expect("nlp kind has coefficients");
    let fuel = problem.fuel.expect("nlp kind has a fuel model");

    let (mut ref_v, mut ref_u) = default_reference(problem);
    let mut warm: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut prev_residual = f64::INFINITY;
    let mut best: Option<(HorizonSolution, SolveDiagnostics)> = None;

    for outer in 0..config.sqp_max_outer_iterations {
        let sub = build_sqp_subproblem(
            &problem.initial_state,
            &problem.lead_s,
            &problem.lead_v,
            &problem.slope,
            &coeffs,
            &fuel,
            &ref_v,
            &ref_u,
            &problem.spec,
        )
        .expect("subproblem dimensions match the parent problem");
        let qp = sub.to_convex_qp().expect("subproblem is convex");
        let warm_ref = warm.as_ref().map(|(x, y)| (x.as_slice(), y.as_slice()));
        let (qp_sol, qp_diag) = admm::solve_qp(&qp, warm_ref, config);
        if qp_diag.status != SolveStatus::Optimal {
            let diag = SolveDiagnostics {
                status: qp_diag.status,
                iterations: outer + 1,
                wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
                exact_dynamics_residual: None,
                ..qp_diag
            };
            let sol = sub.solution_from_qp(&qp_sol.x, &qp_sol.y, qp_sol.objective);
            return Ok((sol, diag));
        }
        warm = Some((qp_sol.x.clone(), qp_sol.y.clone()));

        let mut sol = sub.solution_from_qp(&qp_sol.x, &qp_sol.y, qp_sol.objective);
        sol.objective = problem.nlp_objective(&sol.v, &sol.u, &sol.a, &sol.b);
        let residual = exact_dyn_residual_inf(problem, &sol);

        // reference update, optionally damped when the exact defect grows
        let mut next_v = sol.v.clone();
        let mut next_u = sol.u.clone();
        if config.sqp_damping && residual > prev_residual && residual > config.feasibility_tolerance
        {
            let mut t = 0.5;
            while t >= 0.0625 {
                let blend_v: Vec<f64> = ref_v
                    .iter()
                    .zip(&sol.v)
                    .map(|(&r, &c)| r + t * (c - r))
                    .collect();
                let blend_u: Vec<f64> = ref_u
                    .iter()
                    .zip(&sol.u)
                    .map(|(&r, &c)| r + t * (c - r))
                    .collect();
                let blend_res = dynamic_residuals(
                    &blend_v,
                    &blend_u,
                    &sol.a,
                    &sol.b,
                    &problem.slope,
                    &coeffs,
                )
                .iter()
                .fold(0.0f64, |acc, r| acc.max(r.abs()));
                if blend_res <= prev_residual {
                    next_v = blend_v;
                    next_u = blend_u;
                    break;
                }
                t *= 0.5;
            }
        }

        let step = ref_v
            .iter()
            .zip(&next_v)
            .map(|(&r, &c)| (c - r).abs())
            .fold(0.0f64, f64::max)
            + ref_u
                .iter()
                .zip(&next_u)
                .map(|(&r, &c)| (c - r).abs())
                .fold(0.0f64, f64::max);
        ref_v = next_v;
        ref_u = next_u;
        prev_residual = residual.min(prev_residual);

        let diag = SolveDiagnostics {
            status: SolveStatus::Optimal,
            iterations: outer + 1,
            primal_residual: qp_diag.primal_residual,
            dual_residual: qp_diag.dual_residual,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
            most_violated_constraint: None,
            exact_dynamics_residual: Some(residual),
        };
        let converged = step <= config.sqp_step_tolerance;
        best = Some((sol, diag));
        if converged {
            break;
        }
        if let Some(limit) = config.time_limit_ms {
            if start.elapsed().as_secs_f64() * 1e3 > limit {
                if let Some((_, d)) = best.as_mut() {
                    d.status = SolveStatus::TimeLimit;
                }
                break;
            }
        }
        if outer + 1 == config.sqp_max_outer_iterations {
            if let Some((_, d)) = best.as_mut() {
                d.status = SolveStatus::MaxIterations;
            }
        }
    }

    let (mut sol, mut diag) = best.expect("at least one outer iteration ran");
    diag.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    sol.objective = problem.nlp_objective(&sol.v, &sol.u, &sol.a, &sol.b);
    Ok((sol, diag))
}
