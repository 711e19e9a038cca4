//! MPC replanning loop: update states, predict the leading agent and slope,
//! build and solve the horizon problem, execute the first control under the
//! jerk limit, transition states, meter fuel, and accumulate metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{predict_leading, slope_at, DrivingCycle, LeadState, SlopeProfile};
use crate::fuel::{fuel_rate_hat, FuelCoefficients};
use crate::ocp::{self, HorizonSolution, HorizonSpec};
use crate::solver::{admm, nlp, sqp, SolveStatus, SolverConfig};
use crate::vehicle::{resistance_accel, VehicleParams};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("episode produced no distance; metrics undefined")]
    ZeroDistance,
    #[error("empty trajectory log")]
    EmptyLog,
    #[error("cycle shorter than one control step")]
    CycleTooShort,
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
}

/// Longitudinal state of the controlled agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub s: f64,
    pub v: f64,
    /// Traction acceleration applied over the last step.
    pub u: f64,
    /// Net acceleration applied over the last step.
    pub a_v: f64,
    /// Braking deceleration applied over the last step.
    pub a_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlMethod {
    Qp,
    Sqp,
    Nlp,
}

impl ControlMethod {
    pub fn label(&self) -> &'static str {
        match self {
            ControlMethod::Qp => "QP",
            ControlMethod::Sqp => "SQP",
            ControlMethod::Nlp => "NLP",
        }
    }
}

impl std::fmt::Display for ControlMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Paper-style agent label, e.g. `Truck-NLP-5F` for a disabled
/// slope-prediction flag.
pub fn agent_label(preset: &str, method: ControlMethod, spec: &HorizonSpec) -> String {
    let horizon_s = spec.horizon_seconds().round() as i64;
    let flag = if spec.use_slope_prediction { "" } else { "F" };
    format!("{preset}-{}-{horizon_s}{flag}", method.label())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub preset_name: String,
    pub method: ControlMethod,
    pub spec: HorizonSpec,
    pub params: VehicleParams,
    pub fuel: FuelCoefficients,
    pub road: SlopeProfile,
    pub cycle: DrivingCycle,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub s: f64,
    pub v: f64,
    pub u: f64,
    pub a_v: f64,
    pub a_b: f64,
    pub theta: f64,
    /// Headway-adjusted gap S_l - (S + t_h V).
    pub gap: f64,
    pub fuel_cum: f64,
    pub solve_ms: f64,
}

/// Serialize a trajectory log with the standard header.
pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("t,s,v,u,a_v,a_b,theta,gap,fuel_cum,solve_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{:.3},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6}\n",
            r.t, r.s, r.v, r.u, r.a_v, r.a_b, r.theta, r.gap, r.fuel_cum, r.solve_ms
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub travel_time: f64,
    pub travel_distance: f64,
    pub fuel_consumption: f64,
    pub average_fuel_rate: f64,
    pub fuel_efficiency: f64,
    pub average_speed: f64,
    pub efficiency_improvement_vs_leading: f64,
    pub average_solve_time: f64,
    pub constraint_violation_count: usize,
    pub completed: bool,
}

/// Fuel efficiency in L/100km from milliliters and meters.
pub fn liters_per_100km(fuel_ml: f64, distance_m: f64) -> f64 {
    fuel_ml * 100.0 / distance_m
}

/// Improvement of the follower over the leader in percent.
pub fn improvement_percent(eff_leader: f64, eff_ego: f64) -> f64 {
    (eff_leader - eff_ego) / eff_leader * 100.0
}

/// Derive the full metric set from summed raw totals.
pub fn metrics_from_totals(
    fuel_ml: f64,
    distance_m: f64,
    time_s: f64,
    average_solve_time: f64,
    constraint_violation_count: usize,
    completed: bool,
) -> Result<EpisodeMetrics, SimError> {
    if !(distance_m > 0.0) || !(time_s > 0.0) {
        return Err(SimError::ZeroDistance);
    }
    Ok(EpisodeMetrics {
        travel_time: time_s,
        travel_distance: distance_m,
        fuel_consumption: fuel_ml,
        average_fuel_rate: fuel_ml / time_s,
        fuel_efficiency: liters_per_100km(fuel_ml, distance_m),
        average_speed: distance_m / time_s,
        efficiency_improvement_vs_leading: 0.0,
        average_solve_time,
        constraint_violation_count,
        completed,
    })
}

/// Recompute metrics from a raw trajectory log. The gap window is needed to
/// recount constraint violations independently.
pub fn compute_metrics(
    log: &[TrajectoryRow],
    d_min: f64,
    d_max: f64,
    completed: bool,
) -> Result<EpisodeMetrics, SimError> {
    if log.len() < 2 {
        return Err(SimError::EmptyLog);
    }
    let first = &log[0];
    let last = &log[log.len() - 1];
    let time = last.t - first.t;
    let distance = last.s - first.s;
    let fuel = last.fuel_cum - first.fuel_cum;
    let solve_rows = &log[..log.len() - 1];
    let avg_solve =
        solve_rows.iter().map(|r| r.solve_ms).sum::<f64>() / solve_rows.len() as f64;
    let violations = log
        .iter()
        .filter(|r| r.gap <= d_min - 1e-3 || r.gap >= d_max + 1e-3)
        .count();
    metrics_from_totals(fuel, distance, time, avg_solve, violations, completed)
}

/// One-step actuation: jerk-limit the requested net acceleration, split it
/// into traction and braking at the actual slope, and integrate the state.
pub fn execute_control(
    x: &EgoState,
    a_desired: f64,
    theta_now: f64,
    dt: f64,
    params: &VehicleParams,
) -> EgoState {
    let coeffs = params.derived_coeffs();
    let bounds = &params.bounds;
    let a_r = resistance_accel(x.v, theta_now, &coeffs);

    let jerk_cap = bounds.jerk_max * dt;
    let mut a_v = a_desired.clamp(x.a_v - jerk_cap, x.a_v + jerk_cap);

    let resolve = |a_v: f64| -> (f64, f64, f64) {
        let demand = a_v + a_r;
        let (u, b) = if demand >= 0.0 {
            (demand.min(bounds.u_max), 0.0)
        } else {
            (0.0, (-demand).min(bounds.b_max))
        };
        (u, b, u - a_r - b)
    };
    let (mut u, mut b, mut a_applied) = resolve(a_v);
    if x.v + a_applied * dt < 0.0 {
        // come to an exact stop instead of integrating backwards
        a_v = -x.v / dt;
        let r = resolve(a_v);
        u = r.0;
        b = r.1;
        a_applied = r.2;
    }
    let v_next = (x.v + a_applied * dt).max(0.0);
    let s_next = x.s + x.v * dt + 0.5 * a_applied * dt * dt;
    EgoState {
        s: s_next,
        v: v_next,
        u,
        a_v: a_applied,
        a_b: b,
    }
}

/// Fuel increment over one step, metered on the post-transition state with
/// the idle floor so braking never meters below idle.
pub fn meter_fuel(x_after: &EgoState, fuel: &FuelCoefficients, dt: f64) -> f64 {
    let idle = fuel_rate_hat(0.0, 0.0, fuel);
    fuel_rate_hat(x_after.v, x_after.u, fuel).max(idle) * dt
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub label: String,
    pub ego: EpisodeMetrics,
    pub leading: EpisodeMetrics,
    pub log: Vec<TrajectoryRow>,
    pub lead_log: Vec<TrajectoryRow>,
    /// Step index at which the solver failed, for incomplete episodes.
    pub failure_step: Option<usize>,
}

fn shift_warm_start(prev: &HorizonSolution, x: &EgoState, dt: f64) -> HorizonSolution {
    let n = prev.v.len();
    let pick = |arr: &[f64], i: usize| arr[(i + 1).min(n - 1)];
    let mut v: Vec<f64> = (0..n).map(|i| pick(&prev.v, i)).collect();
    let u: Vec<f64> = (0..n).map(|i| pick(&prev.u, i)).collect();
    let a: Vec<f64> = (0..n).map(|i| pick(&prev.a, i)).collect();
    let b: Vec<f64> = (0..n).map(|i| pick(&prev.b, i)).collect();
    v[0] = x.v;
    // horizon solutions live in the ego-relative frame, so s restarts at 0
    let mut s = vec![0.0; n];
    for i in 0..n - 1 {
        s[i + 1] = s[i] + v[i] * dt + 0.5 * a[i] * dt * dt;
    }
    // pack the shifted arrays as a primal warm point for the inner solver
    // and keep the previous duals, which change slowly between steps
    let mut qp_x = vec![0.0; ocp::FULL_VARS * n];
    for i in 0..n {
        qp_x[ocp::full_s(i)] = s[i];
        qp_x[ocp::full_v(i)] = v[i];
        qp_x[ocp::full_u(i)] = u[i];
        qp_x[ocp::full_a(i)] = a[i];
        qp_x[ocp::full_b(i)] = b[i];
    }
    HorizonSolution {
        s,
        v,
        u,
        a,
        b,
        objective: prev.objective,
        max_acc_violation: 0.0,
        max_kinematic_residual: 0.0,
        max_dynamic_residual: 0.0,
        qp_x,
        qp_y: prev.qp_y.clone(),
    }
}

/// Run one MPC episode against the leading agent defined by the cycle.
pub fn run_episode(config: &EpisodeConfig) -> Result<EpisodeOutcome, SimError> {
    let spec = &config.spec;
    spec.validate()
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let n_t = spec.horizon_steps;
    let dt = spec.dt;
    if (config.cycle.timestep - dt).abs() > 1e-12 {
        return Err(SimError::InvalidConfig(
            "cycle timestep must match the control timestep".into(),
        ));
    }
    let steps = config.cycle.steps();
    if steps < 2 {
        return Err(SimError::CycleTooShort);
    }
    let coeffs = config.params.derived_coeffs();
    let fuel = &config.fuel;

    let v0 = config.cycle.speeds[0].clamp(0.0, spec.bounds.v_max);
    let mut x = EgoState {
        s: 0.0,
        v: v0,
        u: 0.0,
        a_v: 0.0,
        a_b: 0.0,
    };
    let lead_at = |k: usize| -> LeadState {
        let base = config.cycle.lead_state(k.min(steps - 1));
        LeadState {
            s: spec.d_init + base.s,
            v: base.v,
            a: base.a,
        }
    };

    let mut log = Vec::with_capacity(steps);
    let mut lead_log = Vec::with_capacity(steps);
    let mut fuel_cum = 0.0f64;
    let mut lead_fuel_cum = 0.0f64;
    let mut violations = 0usize;
    let mut failure_step = None;
    let mut qp_warm: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut nlp_warm: Option<HorizonSolution> = None;
    // predicted ego positions for slope lookup, rolled forward each solve
    let mut pred_pos: Option<Vec<f64>> = None;

    let push_rows = |log: &mut Vec<TrajectoryRow>,
                     lead_log: &mut Vec<TrajectoryRow>,
                     k: usize,
                     x: &EgoState,
                     lead: &LeadState,
                     lead_controls: (f64, f64),
                     fuel_cum: f64,
                     lead_fuel_cum: f64,
                     solve_ms: f64,
                     spec: &HorizonSpec,
                     road: &SlopeProfile| {
        let gap = lead.s - (x.s + spec.time_headway * x.v);
        log.push(TrajectoryRow {
            t: k as f64 * spec.dt,
            s: x.s,
            v: x.v,
            u: x.u,
            a_v: x.a_v,
            a_b: x.a_b,
            theta: slope_at(x.s, road),
            gap,
            fuel_cum,
            solve_ms,
        });
        lead_log.push(TrajectoryRow {
            t: k as f64 * spec.dt,
            s: lead.s,
            v: lead.v,
            u: lead_controls.0,
            a_v: lead.a,
            a_b: lead_controls.1,
            theta: slope_at(lead.s, road),
            gap: 0.0,
            fuel_cum: lead_fuel_cum,
            solve_ms: 0.0,
        });
    };

    push_rows(
        &mut log, &mut lead_log, 0, &x, &lead_at(0), (0.0, 0.0), 0.0, 0.0, 0.0, spec, &config.road,
    );

    for k in 0..steps - 1 {
        let lead = lead_at(k);
        let (lead_s_pred, lead_v_pred, _) = predict_leading(&lead, n_t, dt);

        let slope_pred: Vec<f64> = if spec.use_slope_prediction {
            let pos = pred_pos
                .clone()
                .unwrap_or_else(|| lead_s_pred.iter().map(|&s| s - spec.d_init).collect());
            pos.iter().map(|&p| slope_at(p, &config.road)).collect()
        } else {
            vec![slope_at(x.s, &config.road); n_t + 1]
        };

        // build the horizon in ego-relative coordinates: absolute position
        // grows without bound over an episode and would dominate the
        // solver's relative feasibility scaling
        let origin = x.s;
        let x_rel = EgoState { s: 0.0, ..x };
        let lead_s_rel: Vec<f64> = lead_s_pred.iter().map(|&s| s - origin).collect();

        let clock = Instant::now();
        let solved: Option<(HorizonSolution, SolveStatus)> = match config.method {
            ControlMethod::Qp => {
                let problem = ocp::build_qp(&x_rel, &lead_s_rel, &lead_v_pred, spec)
                    .expect("builder arrays sized to the horizon");
                let qp = problem.to_convex_qp().expect("qp kind is convex");
                let warm = qp_warm.as_ref().map(|(x, y)| (x.as_slice(), y.as_slice()));
                let (sol, diag) = admm::solve_qp(&qp, warm, &config.solver);
                qp_warm = Some((sol.x.clone(), sol.y.clone()));
                Some((
                    problem.solution_from_qp(&sol.x, &sol.y, sol.objective),
                    diag.status,
                ))
            }
            ControlMethod::Sqp => {
                let problem = ocp::build_nlp(
                    &x_rel, &lead_s_rel, &lead_v_pred, &slope_pred, &coeffs, fuel, spec,
                )
                .expect("builder arrays sized to the horizon");
                sqp::solve_sqp(&problem, &config.solver)
                    .ok()
                    .map(|(sol, diag)| (sol, diag.status))
            }
            ControlMethod::Nlp => {
                let problem = ocp::build_nlp(
                    &x_rel, &lead_s_rel, &lead_v_pred, &slope_pred, &coeffs, fuel, spec,
                )
                .expect("builder arrays sized to the horizon");
                let warm = nlp_warm
                    .as_ref()
                    .map(|sol| shift_warm_start(sol, &x_rel, dt));
                let out = nlp::solve_nlp(&problem, warm.as_ref(), &config.solver)
                    .ok()
                    .map(|(sol, diag)| (sol, diag.status));
                if let Some((sol, _)) = &out {
                    nlp_warm = Some(sol.clone());
                }
                out
            }
        };
        let solve_ms = clock.elapsed().as_secs_f64() * 1e3;

        let Some((sol, status)) = solved else {
            failure_step = Some(k);
            break;
        };
        let usable = match status {
            SolveStatus::Optimal => true,
            SolveStatus::Infeasible => false,
            _ => {
                // degraded solve: accept if the plan is still consistent
                sol.max_acc_violation < 1e-3
                    && sol.max_kinematic_residual < 1e-4
                    && sol.max_dynamic_residual < 1e-3
            }
        };
        if !usable {
            failure_step = Some(k);
            break;
        }
        if status != SolveStatus::Optimal {
            violations += 1;
        }
        pred_pos = Some({
            let mut rolled: Vec<f64> = sol.s[1..].iter().map(|&s| s + origin).collect();
            rolled.push(sol.s[n_t] + origin);
            rolled
        });

        let theta_now = slope_at(x.s, &config.road);
        let a_desired = match config.method {
            ControlMethod::Qp => sol.a[0],
            _ => sol.u[0] - resistance_accel(x.v, theta_now, &coeffs) - sol.b[0],
        };
        x = execute_control(&x, a_desired, theta_now, dt, &config.params);
        fuel_cum += meter_fuel(&x, fuel, dt);

        // leading agent: same metering convention, brakes absorb deficit
        let lead_next = lead_at(k + 1);
        let theta_lead = slope_at(lead.s, &config.road);
        let lead_demand = lead.a + resistance_accel(lead.v, theta_lead, &coeffs);
        let (lead_u, lead_b) = if lead_demand >= 0.0 {
            (lead_demand, 0.0)
        } else {
            (0.0, -lead_demand)
        };
        let lead_after = EgoState {
            s: lead_next.s,
            v: lead_next.v,
            u: lead_u,
            a_v: lead.a,
            a_b: lead_b,
        };
        lead_fuel_cum += meter_fuel(&lead_after, fuel, dt);

        push_rows(
            &mut log,
            &mut lead_log,
            k + 1,
            &x,
            &lead_next,
            (lead_u, lead_b),
            fuel_cum,
            lead_fuel_cum,
            solve_ms,
            spec,
            &config.road,
        );
        let gap = log.last().unwrap().gap;
        if gap <= spec.d_min - 1e-3 || gap >= spec.d_max + 1e-3 {
            violations += 1;
        }
    }

    let completed = failure_step.is_none();
    let mut ego = compute_metrics(&log, spec.d_min, spec.d_max, completed)?;
    ego.constraint_violation_count = violations;
    let mut leading = compute_metrics(&lead_log, spec.d_min, spec.d_max, true)?;
    leading.constraint_violation_count = 0;
    ego.efficiency_improvement_vs_leading =
        improvement_percent(leading.fuel_efficiency, ego.fuel_efficiency);
    Ok(EpisodeOutcome {
        label: agent_label(&config.preset_name, config.method, spec),
        ego,
        leading,
        log,
        lead_log,
        failure_step,
    })
}
