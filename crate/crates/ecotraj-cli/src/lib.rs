//! Scenario configuration and command implementations behind the `eco-traj`
//! binary. Kept in a library so the parsing and command plumbing are
//! testable without spawning processes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ecotraj::env::{load_driving_cycle, DrivingCycle};
use ecotraj::fuel::{fit_fuel_model, optimize_gears, FitReport, FuelCoefficients};
use ecotraj::matrix::{self, MatrixReport, MatrixSpec};
use ecotraj::ocp::HorizonSpec;
use ecotraj::presets;
use ecotraj::sim::{self, ControlMethod, EpisodeConfig, TrajectoryRow};
use ecotraj::solver::SolverConfig;
use ecotraj::vehicle::{engine_map_from_csv, EngineMap, VehicleParams};

fn default_dt() -> f64 {
    0.1
}
fn default_cycle_duration() -> f64 {
    300.0
}
fn default_slope_prediction() -> Vec<bool> {
    vec![true]
}
fn default_repeat() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSpec {
    /// Builtin name (`highway`, `urban`) or a label for a file cycle.
    pub name: String,
    /// CSV path (`time_s,speed_m_s`); omitted for builtin cycles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default = "default_repeat")]
    pub repeat: usize,
}

/// Optional overrides applied on top of the solver defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasibility_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimality_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sqp_step_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sqp_max_outer_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sqp_damping: Option<bool>,
}

impl SolverOverrides {
    pub fn apply(&self, base: SolverConfig) -> SolverConfig {
        SolverConfig {
            max_iterations: self.max_iterations.unwrap_or(base.max_iterations),
            feasibility_tolerance: self
                .feasibility_tolerance
                .unwrap_or(base.feasibility_tolerance),
            optimality_tolerance: self
                .optimality_tolerance
                .unwrap_or(base.optimality_tolerance),
            sqp_step_tolerance: self.sqp_step_tolerance.unwrap_or(base.sqp_step_tolerance),
            sqp_max_outer_iterations: self
                .sqp_max_outer_iterations
                .unwrap_or(base.sqp_max_outer_iterations),
            sqp_damping: self.sqp_damping.unwrap_or(base.sqp_damping),
            ..base
        }
    }
}

/// TOML experiment description; the cross-product of the list fields defines
/// the run matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Vehicle preset: `truck` or `sedan`.
    pub preset: String,
    /// Optional TOML file overriding the preset's vehicle parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_file: Option<String>,
    pub cycles: Vec<CycleSpec>,
    pub roads: Vec<String>,
    pub methods: Vec<String>,
    pub horizons_s: Vec<f64>,
    #[serde(default = "default_slope_prediction")]
    pub slope_prediction: Vec<bool>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Duration used when synthesizing the builtin cycles.
    #[serde(default = "default_cycle_duration")]
    pub cycle_duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverOverrides>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    toml::from_str(text).context("failed to parse scenario TOML")
}

pub fn parse_method(name: &str) -> Result<ControlMethod> {
    match name.to_ascii_uppercase().as_str() {
        "QP" => Ok(ControlMethod::Qp),
        "SQP" => Ok(ControlMethod::Sqp),
        "NLP" => Ok(ControlMethod::Nlp),
        other => bail!("unknown method {other:?} (expected QP, SQP or NLP)"),
    }
}

fn preset_params(name: &str) -> Result<(VehicleParams, FuelCoefficients, String)> {
    match name.to_ascii_lowercase().as_str() {
        "truck" => Ok((
            presets::truck_params(),
            presets::truck_fuel_coefficients(),
            "Truck".to_string(),
        )),
        "sedan" => Ok((
            presets::sedan_params(),
            presets::sedan_fuel_coefficients(),
            "Sedan".to_string(),
        )),
        other => bail!("unknown preset {other:?} (expected truck or sedan)"),
    }
}

fn load_cycle(spec: &CycleSpec, dt: f64, duration_s: f64, base: &Path) -> Result<DrivingCycle> {
    let mut cycle = match &spec.path {
        Some(path) => {
            let full = base.join(path);
            let text = fs::read_to_string(&full)
                .with_context(|| format!("cannot read cycle file {}", full.display()))?;
            load_driving_cycle(&spec.name, &text, dt)?
        }
        None => match spec.name.as_str() {
            "highway" => presets::synthetic_highway_cycle(duration_s, dt),
            "urban" => presets::synthetic_urban_cycle(duration_s, dt),
            other => bail!("cycle {other:?} has no path and is not a builtin"),
        },
    };
    // keep the scenario's name so run selections can refer to it
    cycle.name = spec.name.clone();
    Ok(if spec.repeat > 1 {
        cycle.repeated(spec.repeat)
    } else {
        cycle
    })
}

/// Resolve a scenario into a fully materialized matrix spec. `base` anchors
/// relative file paths.
pub fn resolve_scenario(config: &ScenarioConfig, base: &Path) -> Result<MatrixSpec> {
    let (mut params, fuel, preset_name) = preset_params(&config.preset)?;
    if let Some(path) = &config.params_file {
        let full = base.join(path);
        let text = fs::read_to_string(&full)
            .with_context(|| format!("cannot read params file {}", full.display()))?;
        params = toml::from_str(&text).context("failed to parse vehicle params TOML")?;
        params.validate()?;
    }
    let cycles = config
        .cycles
        .iter()
        .map(|c| load_cycle(c, config.dt, config.cycle_duration_s, base))
        .collect::<Result<Vec<_>>>()?;
    let roads = config
        .roads
        .iter()
        .map(|name| {
            presets::named_profile(name)
                .map(|p| (name.clone(), p))
                .with_context(|| format!("unknown road profile {name:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let methods = config
        .methods
        .iter()
        .map(|m| parse_method(m))
        .collect::<Result<Vec<_>>>()?;
    let horizon_steps = config
        .horizons_s
        .iter()
        .map(|&h| (h / config.dt).round() as usize)
        .collect();
    let solver = config
        .solver
        .as_ref()
        .map(|o| o.apply(SolverConfig::default()))
        .unwrap_or_default();
    Ok(MatrixSpec {
        preset_name,
        params,
        fuel,
        cycles,
        roads,
        methods,
        horizon_steps,
        slope_prediction: config.slope_prediction.clone(),
        dt: config.dt,
        time_headway: presets::TIME_HEADWAY,
        d_init: presets::D_INIT,
        solver,
        qp_weights: presets::qp_weights(),
        sqp_weights: presets::sqp_weights(),
        nlp_weights: presets::nlp_weights(),
    })
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct FitOutput {
    /// `appendix:<preset>`, `synthetic`, or the map file name.
    pub source: String,
    /// SHA-256 of the canonical map serialization, absent for appendix
    /// coefficients.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_sha256: Option<String>,
    pub coefficients: FuelCoefficients,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<FitReport>,
}

fn map_digest(map: &EngineMap) -> String {
    let mut hasher = Sha256::new();
    let mut feed = |values: &[f64]| {
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    };
    feed(&map.speed_grid);
    feed(&map.torque_grid);
    feed(&map.max_torque_curve);
    for row in &map.efficiency_grid {
        feed(row);
    }
    format!("{:x}", hasher.finalize())
}

pub fn fit_from_map(
    map: &EngineMap,
    params: &VehicleParams,
    source: &str,
) -> Result<FitOutput> {
    let samples = optimize_gears(
        map,
        params,
        &ecotraj::fuel::default_v_range(),
        &ecotraj::fuel::default_a_range(),
    )?;
    let (coefficients, report) = fit_fuel_model(&samples)?;
    Ok(FitOutput {
        source: source.to_string(),
        map_sha256: Some(map_digest(map)),
        coefficients,
        report: Some(report),
    })
}

pub enum FitSource {
    Preset(String),
    Synthetic,
    Files { map: PathBuf, curve: PathBuf, params: PathBuf },
}

pub fn fit_command(source: FitSource) -> Result<FitOutput> {
    match source {
        FitSource::Preset(name) => {
            let (_, fuel, preset_name) = preset_params(&name)?;
            Ok(FitOutput {
                source: format!("appendix:{}", preset_name.to_ascii_lowercase()),
                map_sha256: None,
                coefficients: fuel,
                report: None,
            })
        }
        FitSource::Synthetic => {
            let map = presets::synthetic_truck_map();
            fit_from_map(&map, &presets::truck_params(), "synthetic")
        }
        FitSource::Files { map, curve, params } => {
            let grid = fs::read_to_string(&map)
                .with_context(|| format!("cannot read map file {}", map.display()))?;
            let curve_text = fs::read_to_string(&curve)
                .with_context(|| format!("cannot read torque curve file {}", curve.display()))?;
            let params_text = fs::read_to_string(&params)
                .with_context(|| format!("cannot read params file {}", params.display()))?;
            let vehicle: VehicleParams =
                toml::from_str(&params_text).context("failed to parse vehicle params TOML")?;
            vehicle.validate()?;
            let engine_map = build_map_from_files(&grid, &curve_text)?;
            fit_from_map(
                &engine_map,
                &vehicle,
                &map.file_name().unwrap_or_default().to_string_lossy(),
            )
        }
    }
}

fn build_map_from_files(grid: &str, curve: &str) -> Result<EngineMap> {
    // bounds default to the grid extents; the parser validates consistency
    let speeds: Vec<f64> = grid
        .lines()
        .next()
        .context("empty map file")?
        .split(',')
        .skip(1)
        .map(|s| s.trim().parse::<f64>().context("bad speed value"))
        .collect::<Result<Vec<_>>>()?;
    let torques: Vec<f64> = grid
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .next()
                .context("empty row")?
                .trim()
                .parse::<f64>()
                .context("bad torque value")
        })
        .collect::<Result<Vec<_>>>()?;
    let speed_bounds = (
        *speeds.first().context("no speeds")?,
        *speeds.last().context("no speeds")?,
    );
    let torque_bounds = (0.0, *torques.last().context("no torques")?);
    Ok(engine_map_from_csv(grid, curve, speed_bounds, torque_bounds)?)
}

// ---------------------------------------------------------------------------
// run / matrix / plotdata
// ---------------------------------------------------------------------------

pub struct RunSelection {
    pub method: String,
    pub horizon_s: f64,
    pub road: String,
    pub cycle: String,
}

/// Run a single combination from a scenario and return the outcome.
pub fn run_command(
    config: &ScenarioConfig,
    base: &Path,
    selection: &RunSelection,
) -> Result<sim::EpisodeOutcome> {
    let spec = resolve_scenario(config, base)?;
    let method = parse_method(&selection.method)?;
    let steps = (selection.horizon_s / spec.dt).round() as usize;
    let road = spec
        .roads
        .iter()
        .find(|(n, _)| *n == selection.road)
        .with_context(|| format!("road {:?} not in scenario", selection.road))?;
    let cycle = spec
        .cycles
        .iter()
        .find(|c| c.name == selection.cycle)
        .with_context(|| format!("cycle {:?} not in scenario", selection.cycle))?;
    let w = spec.weights_for(method);
    let episode = EpisodeConfig {
        preset_name: spec.preset_name.clone(),
        method,
        spec: HorizonSpec {
            horizon_steps: steps,
            dt: spec.dt,
            time_headway: spec.time_headway,
            d_min: w.d_min,
            d_max: w.d_max,
            d_init: spec.d_init,
            w1: w.w1,
            w2: w.w2,
            w3: w.w3,
            bounds: spec.params.bounds,
            use_slope_prediction: config.slope_prediction.first().copied().unwrap_or(true),
        },
        params: spec.params.clone(),
        fuel: spec.fuel,
        road: road.1.clone(),
        cycle: cycle.clone(),
        solver: spec.solver.clone(),
    };
    Ok(sim::run_episode(&episode)?)
}

pub struct MatrixArtifacts {
    pub report: MatrixReport,
    pub all_passed: bool,
}

/// Run the matrix and write the report files into `out_dir`.
pub fn matrix_command(config: &ScenarioConfig, base: &Path, out_dir: &Path) -> Result<MatrixArtifacts> {
    let spec = resolve_scenario(config, base)?;
    let report = matrix::run_matrix(&spec)?;
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    fs::write(out_dir.join("comprehensive.csv"), matrix::comprehensive_csv(&report))?;
    fs::write(out_dir.join("nlp_vs_qp.csv"), matrix::nlp_vs_qp_csv(&report))?;
    fs::write(out_dir.join("solve_times.csv"), matrix::solve_times_csv(&report))?;
    fs::write(
        out_dir.join("episodes.json"),
        serde_json::to_string_pretty(&report.episodes)?,
    )?;
    let all_passed = report
        .aggregates
        .iter()
        .all(|row| row.completed && row.constraint_violation_count == 0);
    Ok(MatrixArtifacts { report, all_passed })
}

/// Parse a trajectory CSV written by [`sim::trajectory_csv`].
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("bad trajectory row at line {}", lineno + 1))?;
        if fields.len() != 10 {
            bail!("trajectory row at line {} has {} fields", lineno + 1, fields.len());
        }
        rows.push(TrajectoryRow {
            t: fields[0],
            s: fields[1],
            v: fields[2],
            u: fields[3],
            a_v: fields[4],
            a_b: fields[5],
            theta: fields[6],
            gap: fields[7],
            fuel_cum: fields[8],
            solve_ms: fields[9],
        });
    }
    Ok(rows)
}

/// Merge a leading log plus per-method ego logs into plot-ready series:
/// time, elevation along the ego path, speeds and cumulative fuel.
pub fn plotdata_command(
    road: &str,
    lead: &[TrajectoryRow],
    methods: &[(String, Vec<TrajectoryRow>)],
) -> Result<String> {
    let profile = presets::named_profile(road)
        .with_context(|| format!("unknown road profile {road:?}"))?;
    let mut header = String::from("t,lead_v,elevation");
    for (label, _) in methods {
        header.push_str(&format!(",v_{label},fuel_{label}"));
    }
    header.push('\n');
    let mut out = header;
    let n = lead.len();
    for (label, rows) in methods {
        if rows.len() != n {
            bail!("log for {label} has {} rows, leading has {n}", rows.len());
        }
    }
    for i in 0..n {
        let anchor = methods.first().map(|(_, rows)| rows[i].s).unwrap_or(lead[i].s);
        let elevation = ecotraj::env::elevation_at(anchor, &profile);
        out.push_str(&format!("{:.3},{:.9},{:.9}", lead[i].t, lead[i].v, elevation));
        for (_, rows) in methods {
            out.push_str(&format!(",{:.9},{:.9}", rows[i].v, rows[i].fuel_cum));
        }
        out.push('\n');
    }
    Ok(out)
}
