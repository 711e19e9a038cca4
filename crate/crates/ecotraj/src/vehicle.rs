//! Vehicle physical constants, longitudinal dynamics, and engine-map fuel
//! rate evaluation (the ground-truth side of the fuel-model pipeline).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Diesel density in g/ml used to convert g/kWh consumption to ml/s.
pub const DIESEL_DENSITY_G_PER_ML: f64 = 0.85;

#[derive(Debug, Error)]
pub enum VehicleError {
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
    #[error("invalid engine map: {0}")]
    InvalidMap(String),
    #[error("engine map query out of bounds: {axis} = {value} outside [{lo}, {hi}]")]
    MapOutOfBounds {
        axis: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("engine map csv parse error: {0}")]
    MapParse(String),
}

/// Actuator and state limits used both as optimization bounds and as
/// execution-time clamps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorBounds {
    /// Maximum speed (m/s).
    pub v_max: f64,
    /// Maximum apparent acceleration (m/s^2).
    pub a_v_max: f64,
    /// Maximum brake deceleration magnitude (m/s^2).
    pub b_max: f64,
    /// Maximum traction acceleration (m/s^2).
    pub u_max: f64,
    /// Maximum jerk magnitude applied at execution time (m/s^3).
    pub jerk_max: f64,
}

/// Physical constants and drivetrain description of one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Equivalent mass M (kg).
    pub mass: f64,
    /// Frontal area A_v (m^2).
    pub frontal_area: f64,
    /// Air density rho (kg/m^3).
    pub air_density: f64,
    /// Air drag coefficient C_d.
    pub drag_coeff: f64,
    /// Rolling resistance coefficient mu.
    pub rolling_coeff: f64,
    /// Gravity g (m/s^2).
    pub gravity: f64,
    /// Wheel radius r (m).
    pub wheel_radius: f64,
    /// Final drive ratio i_f.
    pub final_drive_ratio: f64,
    /// Transmission efficiency eta.
    pub transmission_efficiency: f64,
    /// Gear ratios i_g, highest (shortest) gear first.
    pub gear_ratios: Vec<f64>,
    pub bounds: ActuatorBounds,
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let positive = [
            ("mass", self.mass),
            ("frontal_area", self.frontal_area),
            ("air_density", self.air_density),
            ("wheel_radius", self.wheel_radius),
            ("final_drive_ratio", self.final_drive_ratio),
            ("transmission_efficiency", self.transmission_efficiency),
            ("v_max", self.bounds.v_max),
            ("a_v_max", self.bounds.a_v_max),
            ("b_max", self.bounds.b_max),
            ("u_max", self.bounds.u_max),
            ("jerk_max", self.bounds.jerk_max),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(VehicleError::InvalidParams(format!(
                    "{name} must be > 0, got {value}"
                )));
            }
        }
        if self.drag_coeff < 0.0 || self.rolling_coeff < 0.0 {
            return Err(VehicleError::InvalidParams(
                "drag_coeff and rolling_coeff must be >= 0".into(),
            ));
        }
        if self.gear_ratios.is_empty() || self.gear_ratios.iter().any(|&g| !(g > 0.0)) {
            return Err(VehicleError::InvalidParams(
                "gear_ratios must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    pub fn derived_coeffs(&self) -> DerivedCoeffs {
        DerivedCoeffs {
            k1: self.drag_coeff * self.air_density * self.frontal_area / (2.0 * self.mass),
            k2: self.rolling_coeff * self.gravity,
            k3: self.gravity,
        }
    }
}

/// Lumped resistance coefficients: drag k1 (1/m), rolling k2 (m/s^2) and
/// grade k3 = g (m/s^2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedCoeffs {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

/// Resistance acceleration a_R = k1 v^2 + k2 cos(theta) + k3 sin(theta).
pub fn resistance_accel(v: f64, theta: f64, coeffs: &DerivedCoeffs) -> f64 {
    coeffs.k1 * v * v + coeffs.k2 * theta.cos() + coeffs.k3 * theta.sin()
}

/// Traction acceleration from the vehicle dynamic equation, u = a_V + a_R + a_B.
/// `a_b` is a brake magnitude (>= 0).
pub fn traction_accel(a_v: f64, a_r: f64, a_b: f64) -> f64 {
    a_v + a_r + a_b
}

/// Discrete engine characteristic and fuel-efficiency maps with bilinear
/// interpolators over a rectangular (engine speed, engine torque) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineMap {
    /// Engine speed grid omega_e (rad/s), strictly increasing.
    pub speed_grid: Vec<f64>,
    /// Engine torque grid T_e (N m), strictly increasing.
    pub torque_grid: Vec<f64>,
    /// Torque limit curve, one value per speed grid point (N m).
    pub max_torque_curve: Vec<f64>,
    /// Fuel efficiency eta_f (g/kWh), row per torque value, column per speed.
    pub efficiency_grid: Vec<Vec<f64>>,
    /// Feasible engine speed range [omega_min, omega_max] (rad/s).
    pub speed_bounds: (f64, f64),
    /// Feasible engine torque range [0, T_max] (N m).
    pub torque_bounds: (f64, f64),
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] > w[0])
}

impl EngineMap {
    pub fn validate(&self) -> Result<(), VehicleError> {
        if self.speed_grid.len() < 2 || self.torque_grid.len() < 2 {
            return Err(VehicleError::InvalidMap("grids need at least 2 points".into()));
        }
        if !strictly_increasing(&self.speed_grid) || !strictly_increasing(&self.torque_grid) {
            return Err(VehicleError::InvalidMap("grids must be strictly increasing".into()));
        }
        if self.max_torque_curve.len() != self.speed_grid.len() {
            return Err(VehicleError::InvalidMap(
                "max_torque_curve length must match speed grid".into(),
            ));
        }
        if self.efficiency_grid.len() != self.torque_grid.len()
            || self
                .efficiency_grid
                .iter()
                .any(|row| row.len() != self.speed_grid.len())
        {
            return Err(VehicleError::InvalidMap(
                "efficiency grid shape must be torque x speed".into(),
            ));
        }
        if self
            .efficiency_grid
            .iter()
            .flatten()
            .any(|&e| !(e > 0.0) || !e.is_finite())
        {
            return Err(VehicleError::InvalidMap("efficiency values must be > 0".into()));
        }
        let (lo, hi) = self.speed_bounds;
        if lo < self.speed_grid[0] || hi > *self.speed_grid.last().unwrap() || lo >= hi {
            return Err(VehicleError::InvalidMap(
                "speed_bounds must lie within the speed grid".into(),
            ));
        }
        if self.torque_bounds.0 != 0.0 || self.torque_bounds.1 > *self.torque_grid.last().unwrap() {
            return Err(VehicleError::InvalidMap(
                "torque_bounds must be [0, T_max] within the torque grid".into(),
            ));
        }
        Ok(())
    }

    /// Torque limit at `omega`, linearly interpolated along the speed grid.
    pub fn max_torque_at(&self, omega: f64) -> f64 {
        interp1(&self.speed_grid, &self.max_torque_curve, omega)
    }

    /// Bilinear fuel efficiency eta_f (g/kWh) at (omega, torque).
    pub fn efficiency_at(&self, omega: f64, torque: f64) -> Result<f64, VehicleError> {
        self.check_bounds(omega, torque)?;
        Ok(self.bilinear(omega, torque))
    }

    /// Engine power (W) at (omega, torque). The grid carries P = omega * T at
    /// its nodes, which bilinear interpolation reproduces exactly.
    pub fn power_at(&self, omega: f64, torque: f64) -> Result<f64, VehicleError> {
        self.check_bounds(omega, torque)?;
        Ok(omega * torque)
    }

    pub fn contains(&self, omega: f64, torque: f64) -> bool {
        self.check_bounds(omega, torque).is_ok()
    }

    fn check_bounds(&self, omega: f64, torque: f64) -> Result<(), VehicleError> {
        let (w_lo, w_hi) = self.speed_bounds;
        if omega < w_lo || omega > w_hi {
            return Err(VehicleError::MapOutOfBounds {
                axis: "engine_speed",
                value: omega,
                lo: w_lo,
                hi: w_hi,
            });
        }
        let t_hi = self.torque_bounds.1.min(self.max_torque_at(omega));
        if torque < 0.0 || torque > t_hi {
            return Err(VehicleError::MapOutOfBounds {
                axis: "engine_torque",
                value: torque,
                lo: 0.0,
                hi: t_hi,
            });
        }
        Ok(())
    }

    fn bilinear(&self, omega: f64, torque: f64) -> f64 {
        let (i, tw) = bracket(&self.speed_grid, omega);
        let (j, tt) = bracket(&self.torque_grid, torque);
        let g = &self.efficiency_grid;
        let a = g[j][i] * (1.0 - tw) + g[j][i + 1] * tw;
        let b = g[j + 1][i] * (1.0 - tw) + g[j + 1][i + 1] * tw;
        a * (1.0 - tt) + b * tt
    }
}

/// Locate `x` in grid, returning the left index and the interpolation weight.
/// Values outside the grid clamp to the end cells.
fn bracket(grid: &[f64], x: f64) -> (usize, f64) {
    let n = grid.len();
    if x <= grid[0] {
        return (0, 0.0);
    }
    if x >= grid[n - 1] {
        return (n - 2, 1.0);
    }
    let i = grid.partition_point(|&g| g <= x) - 1;
    let i = i.min(n - 2);
    (i, (x - grid[i]) / (grid[i + 1] - grid[i]))
}

fn interp1(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let (i, t) = bracket(xs, x);
    ys[i] * (1.0 - t) + ys[i + 1] * t
}

/// Engine operating point for one (v, u, gear) combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineState {
    /// Engine speed omega_e (rad/s).
    pub engine_speed: f64,
    /// Engine torque T_e (N m).
    pub engine_torque: f64,
    /// 1-based gear index.
    pub gear_index: usize,
    /// Engine power P_e (W), populated when the point is feasible.
    pub power: f64,
    /// Fuel efficiency eta_f (g/kWh), populated when the point is feasible.
    pub efficiency: f64,
    /// Whether (omega_e, T_e) lies within the map bounds.
    pub feasible: bool,
}

/// Map (v, u, gear) through the drivetrain to an engine operating point.
///
/// Infeasible points (outside map bounds, e.g. below idle) come back flagged
/// rather than as errors; gear optimization consumes the flag.
pub fn engine_state(
    v: f64,
    u: f64,
    gear_index: usize,
    params: &VehicleParams,
    map: &EngineMap,
) -> Result<EngineState, VehicleError> {
    let Some(&gear_ratio) = params.gear_ratios.get(gear_index.wrapping_sub(1)) else {
        return Err(VehicleError::InvalidParams(format!(
            "gear index {gear_index} out of range 1..={}",
            params.gear_ratios.len()
        )));
    };
    let transmission_ratio = gear_ratio * params.final_drive_ratio;
    let traction_force = u * params.mass;
    let wheel_torque = traction_force * params.wheel_radius;
    let engine_torque = wheel_torque / (transmission_ratio * params.transmission_efficiency);
    let engine_speed = v * transmission_ratio / params.wheel_radius;
    let feasible = map.contains(engine_speed, engine_torque);
    let (power, efficiency) = if feasible {
        (
            map.power_at(engine_speed, engine_torque)?,
            map.efficiency_at(engine_speed, engine_torque)?,
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(EngineState {
        engine_speed,
        engine_torque,
        gear_index,
        power,
        efficiency,
        feasible,
    })
}

/// Fuel rate (ml/s) of a feasible engine state: f_r = P_e[kW] * eta_f / c_u
/// with c_u = rho_g * 3600 once P_e is expressed in kW.
pub fn map_fuel_rate(state: &EngineState, map: &EngineMap) -> Result<f64, VehicleError> {
    // Vehicle at rest is treated as idle: map value at omega_min, T_e = 0.
    let (omega, torque) = if state.engine_speed == 0.0 && state.engine_torque == 0.0 {
        (map.speed_bounds.0, 0.0)
    } else {
        (state.engine_speed, state.engine_torque)
    };
    let power_kw = map.power_at(omega, torque)? / 1000.0;
    let efficiency = map.efficiency_at(omega, torque)?;
    Ok(power_kw * efficiency / (DIESEL_DENSITY_G_PER_ML * 3600.0))
}

/// Parse an engine map from two CSV files: the efficiency grid
/// (`omega_rad_s` header row then `torque_nm, eff@w1, eff@w2, ...` rows) and
/// the two-column torque limit curve `omega_rad_s,max_torque_nm`.
pub fn engine_map_from_csv(
    grid_csv: &str,
    torque_curve_csv: &str,
    speed_bounds: (f64, f64),
    torque_bounds: (f64, f64),
) -> Result<EngineMap, VehicleError> {
    let parse =
        |s: &str, what: &str| -> Result<f64, VehicleError> {
            s.trim().parse::<f64>().map_err(|_| {
                VehicleError::MapParse(format!("bad {what} value: {s:?}"))
            })
        };

    let mut lines = grid_csv.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| VehicleError::MapParse("empty grid csv".into()))?;
    let mut cells = header.split(',');
    let tag = cells.next().unwrap_or("").trim();
    if tag != "omega_rad_s" {
        return Err(VehicleError::MapParse(format!(
            "grid header must start with omega_rad_s, got {tag:?}"
        )));
    }
    let speed_grid: Vec<f64> = cells
        .map(|c| parse(c, "omega"))
        .collect::<Result<_, _>>()?;

    let mut torque_grid = Vec::new();
    let mut efficiency_grid = Vec::new();
    for line in lines {
        let mut cells = line.split(',');
        let torque = parse(cells.next().unwrap_or(""), "torque")?;
        let row: Vec<f64> = cells
            .map(|c| parse(c, "efficiency"))
            .collect::<Result<_, _>>()?;
        if row.len() != speed_grid.len() {
            return Err(VehicleError::MapParse(format!(
                "row for torque {torque} has {} cells, expected {}",
                row.len(),
                speed_grid.len()
            )));
        }
        torque_grid.push(torque);
        efficiency_grid.push(row);
    }

    let mut curve_speeds = Vec::new();
    let mut curve_torques = Vec::new();
    for line in torque_curve_csv.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        curve_speeds.push(parse(cells.next().unwrap_or(""), "omega")?);
        curve_torques.push(parse(cells.next().unwrap_or(""), "max torque")?);
    }
    if curve_speeds.is_empty() {
        return Err(VehicleError::MapParse("empty torque limit curve".into()));
    }
    // Resample the curve onto the grid speeds so shapes line up.
    let max_torque_curve = speed_grid
        .iter()
        .map(|&w| interp1(&curve_speeds, &curve_torques, w))
        .collect();

    let map = EngineMap {
        speed_grid,
        torque_grid,
        max_torque_curve,
        efficiency_grid,
        speed_bounds,
        torque_bounds,
    };
    map.validate()?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_relative_eq;

    #[test]
    fn derived_coeffs_sedan() {
        let k = presets::sedan_params().derived_coeffs();
        assert_relative_eq!(k.k1, 3.9467e-4, max_relative = 1e-3);
        assert_relative_eq!(k.k2, 0.015 * 9.81);
        assert_relative_eq!(k.k3, 9.81);
    }

    #[test]
    fn derived_coeffs_truck() {
        let k = presets::truck_params().derived_coeffs();
        assert_relative_eq!(k.k2, 0.05886);
    }

    #[test]
    fn derived_coeffs_zero_rolling() {
        let mut p = presets::truck_params();
        p.rolling_coeff = 0.0;
        assert_eq!(p.derived_coeffs().k2, 0.0);
    }

    #[test]
    fn resistance_accel_cases() {
        let zero = DerivedCoeffs { k1: 0.0, k2: 0.0, k3: 9.81 };
        assert_eq!(resistance_accel(0.0, 0.0, &zero), 0.0);

        let sedan = presets::sedan_params().derived_coeffs();
        assert_relative_eq!(resistance_accel(0.0, 0.0, &sedan), 0.14715);

        let truck = presets::truck_params().derived_coeffs();
        // 0.000185*400 + 0.05886 cos(0.02) + 9.81 sin(0.02) = 0.3290351
        assert_relative_eq!(resistance_accel(20.0, 0.02, &truck), 0.3290351, max_relative = 1e-4);
    }

    #[test]
    fn resistance_accel_slope_symmetry() {
        let truck = presets::truck_params().derived_coeffs();
        for &(v, th) in &[(5.0, 0.01), (12.0, 0.05), (25.0, -0.03)] {
            let sum = resistance_accel(v, th, &truck) + resistance_accel(v, -th, &truck);
            let even = 2.0 * (truck.k1 * v * v + truck.k2 * th.cos());
            assert_relative_eq!(sum, even, epsilon = 1e-12);
        }
    }

    #[test]
    fn traction_accel_cases() {
        assert_eq!(traction_accel(0.0, 0.0, 0.0), 0.0);
        assert_relative_eq!(traction_accel(0.5, 0.147, 0.0), 0.647);
        assert_relative_eq!(traction_accel(-1.0, 0.147, 0.853), 0.0);
    }

    #[test]
    fn engine_state_drivetrain_algebra() {
        let mut params = presets::truck_params();
        params.wheel_radius = 0.5;
        params.final_drive_ratio = 3.0;
        params.gear_ratios = vec![2.0];
        let map = presets::synthetic_truck_map();

        // u=1, M=4800, r=0.5 -> F_t = 4800 N, T_w = 2400 N m
        let st = engine_state(10.0, 1.0, 1, &params, &map).unwrap();
        let wheel_torque = 1.0 * params.mass * params.wheel_radius;
        assert_relative_eq!(wheel_torque, 2400.0);
        assert_relative_eq!(
            st.engine_torque,
            2400.0 / (6.0 * params.transmission_efficiency)
        );
        // i_g=2, i_f=3, v=10, r=0.5 -> omega_e = 120 rad/s
        assert_relative_eq!(st.engine_speed, 120.0);
    }

    #[test]
    fn engine_state_at_rest_is_infeasible() {
        let params = presets::truck_params();
        let map = presets::synthetic_truck_map();
        let st = engine_state(0.0, 0.0, 1, &params, &map).unwrap();
        assert_eq!(st.engine_speed, 0.0);
        assert_eq!(st.engine_torque, 0.0);
        assert!(!st.feasible, "below idle must be flagged infeasible");
    }

    #[test]
    fn engine_state_torque_linear_in_u() {
        let params = presets::truck_params();
        let map = presets::synthetic_truck_map();
        let a = engine_state(15.0, 0.5, 4, &params, &map).unwrap();
        let b = engine_state(15.0, 1.0, 4, &params, &map).unwrap();
        assert_relative_eq!(b.engine_torque, 2.0 * a.engine_torque, epsilon = 1e-12);
        assert_relative_eq!(a.engine_speed, b.engine_speed);
    }

    #[test]
    fn map_fuel_rate_formula() {
        // P_e = 100 kW, eta_f = 200 g/kWh -> 100*200/(0.85*3600) ml/s
        let fr = 100.0 * 200.0 / (0.85 * 3600.0);
        assert_relative_eq!(fr, 6.5359, max_relative = 1e-4);

        // constant-efficiency map: fuel rate linear in power
        let map = EngineMap {
            speed_grid: vec![50.0, 700.0],
            torque_grid: vec![0.0, 800.0],
            max_torque_curve: vec![800.0, 800.0],
            efficiency_grid: vec![vec![200.0, 200.0], vec![200.0, 200.0]],
            speed_bounds: (62.0, 630.0),
            torque_bounds: (0.0, 724.0),
        };
        map.validate().unwrap();
        let st = |w: f64, t: f64| EngineState {
            engine_speed: w,
            engine_torque: t,
            gear_index: 1,
            power: w * t,
            efficiency: 200.0,
            feasible: true,
        };
        let f1 = map_fuel_rate(&st(200.0, 100.0), &map).unwrap();
        let f2 = map_fuel_rate(&st(200.0, 200.0), &map).unwrap();
        assert_relative_eq!(f2, 2.0 * f1, epsilon = 1e-12);
        assert_relative_eq!(
            f1,
            (200.0 * 100.0 / 1000.0) * 200.0 / (0.85 * 3600.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn map_fuel_rate_zero_power_at_idle_floor() {
        let map = presets::synthetic_truck_map();
        let st = EngineState {
            engine_speed: 0.0,
            engine_torque: 0.0,
            gear_index: 1,
            power: 0.0,
            efficiency: f64::NAN,
            feasible: false,
        };
        // idle convention: omega_min with T_e = 0 -> zero power -> zero fuel
        assert_eq!(map_fuel_rate(&st, &map).unwrap(), 0.0);
    }

    #[test]
    fn map_out_of_bounds_names_the_bound() {
        let map = presets::synthetic_truck_map();
        let err = map.efficiency_at(1000.0, 100.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("engine_speed"), "{msg}");
    }

    #[test]
    fn interpolation_exact_at_nodes() {
        let map = presets::synthetic_truck_map();
        for (j, &t) in map.torque_grid.iter().enumerate().step_by(7) {
            for (i, &w) in map.speed_grid.iter().enumerate().step_by(5) {
                if map.contains(w, t) {
                    let e = map.efficiency_at(w, t).unwrap();
                    assert_relative_eq!(e, map.efficiency_grid[j][i], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let map = presets::synthetic_truck_map();
        let mut grid = String::from("omega_rad_s");
        for w in &map.speed_grid {
            grid.push_str(&format!(",{w}"));
        }
        grid.push('\n');
        for (j, t) in map.torque_grid.iter().enumerate() {
            grid.push_str(&format!("{t}"));
            for e in &map.efficiency_grid[j] {
                grid.push_str(&format!(",{e}"));
            }
            grid.push('\n');
        }
        let mut curve = String::from("omega_rad_s,max_torque_nm\n");
        for (w, t) in map.speed_grid.iter().zip(&map.max_torque_curve) {
            curve.push_str(&format!("{w},{t}\n"));
        }
        let parsed =
            engine_map_from_csv(&grid, &curve, map.speed_bounds, map.torque_bounds).unwrap();
        assert_eq!(parsed.speed_grid, map.speed_grid);
        assert_eq!(parsed.torque_grid, map.torque_grid);
        for (a, b) in parsed
            .max_torque_curve
            .iter()
            .zip(&map.max_torque_curve)
        {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn csv_rejects_bad_header() {
        let err = engine_map_from_csv("bogus,1,2\n0,1,2\n", "omega_rad_s,max_torque_nm\n1,1\n", (62.0, 630.0), (0.0, 724.0));
        assert!(err.is_err());
    }
}
