//! Batch experiment matrix: run every method x horizon x road x cycle
//! combination, aggregate by the sum-then-derive rule, and emit the
//! comparison tables as CSV.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{DrivingCycle, SlopeProfile};
use crate::fuel::FuelCoefficients;
use crate::ocp::HorizonSpec;
use crate::sim::{self, ControlMethod, EpisodeConfig, EpisodeOutcome, SimError};
use crate::solver::SolverConfig;
use crate::vehicle::VehicleParams;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("empty matrix: need at least one method, cycle and road")]
    EmptyMatrix,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Fully resolved experiment matrix (file loading and preset lookup happen
/// in the CLI layer).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixSpec {
    pub preset_name: String,
    pub params: VehicleParams,
    pub fuel: FuelCoefficients,
    pub cycles: Vec<DrivingCycle>,
    pub roads: Vec<(String, SlopeProfile)>,
    pub methods: Vec<ControlMethod>,
    /// Horizon lengths in steps (e.g. 50 and 100 at dt = 0.1).
    pub horizon_steps: Vec<usize>,
    pub slope_prediction: Vec<bool>,
    pub dt: f64,
    pub time_headway: f64,
    pub d_init: f64,
    pub solver: SolverConfig,
    /// Weight presets per method.
    pub qp_weights: crate::presets::MethodWeights,
    pub sqp_weights: crate::presets::MethodWeights,
    pub nlp_weights: crate::presets::MethodWeights,
}

impl MatrixSpec {
    pub fn weights_for(&self, method: ControlMethod) -> &crate::presets::MethodWeights {
        match method {
            ControlMethod::Qp => &self.qp_weights,
            ControlMethod::Sqp => &self.sqp_weights,
            ControlMethod::Nlp => &self.nlp_weights,
        }
    }

    fn horizon_spec(&self, method: ControlMethod, steps: usize, slope_flag: bool) -> HorizonSpec {
        let w = self.weights_for(method);
        HorizonSpec {
            horizon_steps: steps,
            dt: self.dt,
            time_headway: self.time_headway,
            d_min: w.d_min,
            d_max: w.d_max,
            d_init: self.d_init,
            w1: w.w1,
            w2: w.w2,
            w3: w.w3,
            bounds: self.params.bounds,
            use_slope_prediction: slope_flag,
        }
    }
}

/// One episode of the matrix, keyed for deterministic ordering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub agent: String,
    pub method: ControlMethod,
    pub horizon_steps: usize,
    pub slope_prediction: bool,
    pub road: String,
    pub cycle: String,
    pub ego: sim::EpisodeMetrics,
    pub leading: sim::EpisodeMetrics,
    pub failure_step: Option<usize>,
}

/// Aggregate over all cycle x road combinations for one agent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub agent: String,
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

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixReport {
    pub episodes: Vec<EpisodeRecord>,
    /// Leading-agent aggregate first, then one row per agent in matrix order.
    pub aggregates: Vec<AggregateRow>,
}

fn aggregate<'a>(
    agent: &str,
    metrics: impl Iterator<Item = &'a sim::EpisodeMetrics>,
    lead_efficiency: Option<f64>,
) -> AggregateRow {
    let mut time = 0.0;
    let mut distance = 0.0;
    let mut fuel = 0.0;
    let mut solve_weighted = 0.0;
    let mut violations = 0usize;
    let mut completed = true;
    for m in metrics {
        time += m.travel_time;
        distance += m.travel_distance;
        fuel += m.fuel_consumption;
        solve_weighted += m.average_solve_time * m.travel_time;
        violations += m.constraint_violation_count;
        completed &= m.completed;
    }
    let efficiency = sim::liters_per_100km(fuel, distance);
    AggregateRow {
        agent: agent.to_string(),
        travel_time: time,
        travel_distance: distance,
        fuel_consumption: fuel,
        average_fuel_rate: fuel / time,
        fuel_efficiency: efficiency,
        average_speed: distance / time,
        efficiency_improvement_vs_leading: lead_efficiency
            .map(|le| sim::improvement_percent(le, efficiency))
            .unwrap_or(0.0),
        average_solve_time: solve_weighted / time,
        constraint_violation_count: violations,
        completed,
    }
}

/// Run the full matrix. Episodes run concurrently; the report ordering is
/// fixed by the combination key, independent of completion order.
pub fn run_matrix(spec: &MatrixSpec) -> Result<MatrixReport, MatrixError> {
    if spec.methods.is_empty()
        || spec.cycles.is_empty()
        || spec.roads.is_empty()
        || spec.horizon_steps.is_empty()
        || spec.slope_prediction.is_empty()
    {
        return Err(MatrixError::EmptyMatrix);
    }

    let mut combos = Vec::new();
    for &method in &spec.methods {
        for &steps in &spec.horizon_steps {
            for &flag in &spec.slope_prediction {
                for (ri, _) in spec.roads.iter().enumerate() {
                    for (ci, _) in spec.cycles.iter().enumerate() {
                        combos.push((method, steps, flag, ri, ci));
                    }
                }
            }
        }
    }

    let outcomes: Vec<Result<(usize, EpisodeOutcome), SimError>> = combos
        .par_iter()
        .enumerate()
        .map(|(idx, &(method, steps, flag, ri, ci))| {
            let config = EpisodeConfig {
                preset_name: spec.preset_name.clone(),
                method,
                spec: spec.horizon_spec(method, steps, flag),
                params: spec.params.clone(),
                fuel: spec.fuel,
                road: spec.roads[ri].1.clone(),
                cycle: spec.cycles[ci].clone(),
                solver: spec.solver.clone(),
            };
            sim::run_episode(&config).map(|out| (idx, out))
        })
        .collect();

    let mut episodes = Vec::with_capacity(combos.len());
    for result in outcomes {
        let (idx, out) = result?;
        let (method, steps, flag, ri, ci) = combos[idx];
        episodes.push(EpisodeRecord {
            agent: out.label.clone(),
            method,
            horizon_steps: steps,
            slope_prediction: flag,
            road: spec.roads[ri].0.clone(),
            cycle: spec.cycles[ci].name.clone(),
            ego: out.ego,
            leading: out.leading,
            failure_step: out.failure_step,
        });
    }
    episodes.sort_by_key(|e| {
        (
            spec.methods.iter().position(|&m| m == e.method),
            e.horizon_steps,
            !e.slope_prediction,
            spec.roads.iter().position(|(n, _)| *n == e.road),
            spec.cycles.iter().position(|c| c.name == e.cycle),
        )
    });

    // leading aggregate over unique cycle x road combos (method-independent)
    let first_agent = episodes[0].agent.clone();
    let lead_row = aggregate(
        &format!("{}-L", spec.preset_name),
        episodes
            .iter()
            .filter(|e| e.agent == first_agent)
            .map(|e| &e.leading),
        None,
    );
    let lead_eff = lead_row.fuel_efficiency;

    let mut aggregates = vec![lead_row];
    let mut seen = Vec::new();
    for e in &episodes {
        if !seen.contains(&e.agent) {
            seen.push(e.agent.clone());
        }
    }
    for agent in seen {
        aggregates.push(aggregate(
            &agent,
            episodes.iter().filter(|e| e.agent == agent).map(|e| &e.ego),
            Some(lead_eff),
        ));
    }
    Ok(MatrixReport {
        episodes,
        aggregates,
    })
}

/// Table I style aggregate CSV. Timing lives in a separate file so this
/// output is bit-reproducible across runs.
pub fn comprehensive_csv(report: &MatrixReport) -> String {
    let mut out = String::from(
        "agent,travel_time_s,travel_distance_m,fuel_consumption_ml,\
         average_fuel_rate_ml_s,fuel_efficiency_l_100km,average_speed_m_s,\
         efficiency_improvement_pct,constraint_violations,completed\n",
    );
    for row in &report.aggregates {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{},{}\n",
            row.agent,
            row.travel_time,
            row.travel_distance,
            row.fuel_consumption,
            row.average_fuel_rate,
            row.fuel_efficiency,
            row.average_speed,
            row.efficiency_improvement_vs_leading,
            row.constraint_violation_count,
            row.completed,
        ));
    }
    out
}

/// Table II style NLP vs QP comparison per horizon/flag variant. Solve-time
/// multiples are in [`solve_times_csv`].
pub fn nlp_vs_qp_csv(report: &MatrixReport) -> String {
    let mut out = String::from("variant,speed_loss_pct,efficiency_improvement_pct\n");
    for qp_row in &report.aggregates {
        let Some(variant) = qp_row.agent.split("-QP-").nth(1) else {
            continue;
        };
        let nlp_agent = qp_row.agent.replace("-QP-", "-NLP-");
        let Some(nlp_row) = report.aggregates.iter().find(|r| r.agent == nlp_agent) else {
            continue;
        };
        let speed_loss =
            (qp_row.average_speed - nlp_row.average_speed) / qp_row.average_speed * 100.0;
        let improvement = (qp_row.fuel_efficiency - nlp_row.fuel_efficiency)
            / qp_row.fuel_efficiency
            * 100.0;
        out.push_str(&format!("{variant},{speed_loss:.9},{improvement:.9}\n"));
    }
    out
}

/// Per-agent timing plus NLP/QP solve-time multiples. Nondeterministic by
/// nature; kept out of the comparison tables.
pub fn solve_times_csv(report: &MatrixReport) -> String {
    let mut out = String::from("agent,average_solve_ms\n");
    for row in &report.aggregates {
        if row.agent.ends_with("-L") {
            continue;
        }
        out.push_str(&format!("{},{:.6}\n", row.agent, row.average_solve_time));
    }
    for qp_row in &report.aggregates {
        let Some(variant) = qp_row.agent.split("-QP-").nth(1) else {
            continue;
        };
        let nlp_agent = qp_row.agent.replace("-QP-", "-NLP-");
        if let Some(nlp_row) = report.aggregates.iter().find(|r| r.agent == nlp_agent) {
            out.push_str(&format!(
                "multiple-NLP/QP-{variant},{:.6}\n",
                nlp_row.average_solve_time / qp_row.average_solve_time
            ));
        }
    }
    out
}
