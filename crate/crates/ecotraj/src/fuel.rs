//! Offline fuel-model stage: gear optimization over a (v, a) sampling grid
//! and least-squares fitting of the bivariate polynomial fuel-rate model
//!
//! ```text
//! f_r(v, u) = o0 + o1 v + o2 v^2 + o3 v^3 + o4 v^4 + (c0 + c1 v + c2 v^2) u
//! ```
//!
//! The model is linear in its eight parameters, so the least-squares fit is
//! solved exactly by an orthogonal factorization rather than a general
//! nonlinear program.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vehicle::{engine_state, map_fuel_rate, EngineMap, VehicleError, VehicleParams};

#[derive(Debug, Error)]
pub enum FuelError {
    #[error("no feasible (v, a) sample on the grid")]
    NoFeasibleSamples,
    #[error("need at least 8 samples spanning 2 distinct v and u values, got {0}")]
    TooFewSamples(usize),
    #[error("rank-deficient design matrix, deficient directions: {0}")]
    RankDeficient(String),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
}

/// One gear-optimized sampling point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GearOptSample {
    /// Vehicle speed (m/s).
    pub v: f64,
    /// Traction acceleration (m/s^2).
    pub u: f64,
    /// Minimum fuel rate over feasible gears (ml/s).
    pub opt_fuel_rate: f64,
    /// 1-based index of the fuel-optimal gear.
    pub opt_gear: usize,
}

/// The eight fitted parameters of the polynomial fuel model; f_r is ml/s
/// with v in m/s and u in m/s^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuelCoefficients {
    pub o0: f64,
    pub o1: f64,
    pub o2: f64,
    pub o3: f64,
    pub o4: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl FuelCoefficients {
    pub fn as_array(&self) -> [f64; 8] {
        [
            self.o0, self.o1, self.o2, self.o3, self.o4, self.c0, self.c1, self.c2,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            o0: a[0],
            o1: a[1],
            o2: a[2],
            o3: a[3],
            o4: a[4],
            c0: a[5],
            c1: a[6],
            c2: a[7],
        }
    }
}

/// Fit quality summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub sample_count: usize,
    /// Mean absolute residual over all samples (ml/s).
    pub mean_abs_error: f64,
    /// Root-mean-square residual over all samples (ml/s).
    pub rms_error: f64,
    /// Mean absolute residual restricted to v in (5, 25), u in (0.1, 1.0).
    pub restricted_mean_abs_error: f64,
}

/// Evaluate the fitted fuel model at (v, u).
pub fn fuel_rate_hat(v: f64, u: f64, c: &FuelCoefficients) -> f64 {
    c.o0 + c.o1 * v + c.o2 * v * v + c.o3 * v * v * v + c.o4 * v * v * v * v
        + (c.c0 + c.c1 * v + c.c2 * v * v) * u
}

/// First and second partial derivatives of the fuel model at (v, u).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuelDerivatives {
    pub df_dv: f64,
    pub df_du: f64,
    pub d2f_dv2: f64,
    /// Identically zero: the model is linear in u.
    pub d2f_du2: f64,
    pub d2f_dvdu: f64,
}

pub fn fuel_rate_hat_derivatives(v: f64, u: f64, c: &FuelCoefficients) -> FuelDerivatives {
    FuelDerivatives {
        df_dv: c.o1
            + 2.0 * c.o2 * v
            + 3.0 * c.o3 * v * v
            + 4.0 * c.o4 * v * v * v
            + (c.c1 + 2.0 * c.c2 * v) * u,
        df_du: c.c0 + c.c1 * v + c.c2 * v * v,
        d2f_dv2: 2.0 * c.o2 + 6.0 * c.o3 * v + 12.0 * c.o4 * v * v + 2.0 * c.c2 * u,
        d2f_du2: 0.0,
        d2f_dvdu: c.c1 + 2.0 * c.c2 * v,
    }
}

/// Evenly spaced sampling grid, inclusive of both ends (within half a step).
pub fn sample_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 0.5).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// Default speed grid: 0.5..30 m/s, step 0.5.
pub fn default_v_range() -> Vec<f64> {
    sample_grid(0.5, 30.0, 0.5)
}

/// Default acceleration grid: -1.0..2.0 m/s^2, step 0.1.
pub fn default_a_range() -> Vec<f64> {
    sample_grid(-1.0, 2.0, 0.1)
}

/// Enumerate all gears at each (v, a) grid point on a flat road with no
/// braking and keep the minimum-fuel feasible gear. Ties break to the lowest
/// gear index; pairs with no feasible gear (or non-positive traction demand)
/// are skipped.
pub fn optimize_gears(
    map: &EngineMap,
    params: &VehicleParams,
    v_range: &[f64],
    a_range: &[f64],
) -> Result<Vec<GearOptSample>, FuelError> {
    let coeffs = params.derived_coeffs();
    let mut samples = Vec::new();
    for &v in v_range {
        for &a in a_range {
            // u from the dynamic equation with theta = 0, a_B = 0
            let u = a + coeffs.k1 * v * v + coeffs.k2;
            if u <= 0.0 {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for gear in 1..=params.gear_ratios.len() {
                let state = engine_state(v, u, gear, params, map)?;
                if !state.feasible {
                    continue;
                }
                let fr = map_fuel_rate(&state, map)?;
                if best.is_none_or(|(b, _)| fr < b) {
                    best = Some((fr, gear));
                }
            }
            if let Some((opt_fuel_rate, opt_gear)) = best {
                if opt_fuel_rate > 0.0 {
                    samples.push(GearOptSample {
                        v,
                        u,
                        opt_fuel_rate,
                        opt_gear,
                    });
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(FuelError::NoFeasibleSamples);
    }
    Ok(samples)
}

fn design_row(v: f64, u: f64) -> [f64; 8] {
    let v2 = v * v;
    [1.0, v, v2, v2 * v, v2 * v2, u, v * u, v2 * u]
}

const COLUMN_NAMES: [&str; 8] = ["1", "v", "v^2", "v^3", "v^4", "u", "v*u", "v^2*u"];

/// Linear least-squares fit of the eight model parameters, solved by SVD.
/// Rank deficiency is reported with the (near-)null directions expressed in
/// the design-column basis.
pub fn fit_fuel_model(
    samples: &[GearOptSample],
) -> Result<(FuelCoefficients, FitReport), FuelError> {
    let n = samples.len();
    let distinct = |f: fn(&GearOptSample) -> f64| {
        let mut vals: Vec<f64> = samples.iter().map(f).collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        vals.dedup();
        vals.len()
    };
    if n < 8 || distinct(|s| s.v) < 2 || distinct(|s| s.u) < 2 {
        return Err(FuelError::TooFewSamples(n));
    }

    let design = DMatrix::from_fn(n, 8, |i, j| design_row(samples[i].v, samples[i].u)[j]);
    let target = DVector::from_fn(n, |i, _| samples[i].opt_fuel_rate);

    let svd = design.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let tol = sigma_max * 1e-10;
    let deficient: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= tol)
        .map(|(i, _)| i)
        .collect();
    if !deficient.is_empty() {
        let v_t = svd.v_t.as_ref().unwrap();
        let mut directions = Vec::new();
        for &k in &deficient {
            let row = v_t.row(k);
            let desc: Vec<String> = row
                .iter()
                .enumerate()
                .filter(|(_, c)| c.abs() > 1e-3)
                .map(|(j, c)| format!("{:+.3}*{}", c, COLUMN_NAMES[j]))
                .collect();
            directions.push(desc.join(" "));
        }
        return Err(FuelError::RankDeficient(directions.join("; ")));
    }

    let solution = svd.solve(&target, tol).expect("svd solve");
    let coeffs = FuelCoefficients::from_array([
        solution[0], solution[1], solution[2], solution[3], solution[4], solution[5], solution[6],
        solution[7],
    ]);

    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut restricted_sum = 0.0;
    let mut restricted_n = 0usize;
    for s in samples {
        let resid = (fuel_rate_hat(s.v, s.u, &coeffs) - s.opt_fuel_rate).abs();
        abs_sum += resid;
        sq_sum += resid * resid;
        if s.v > 5.0 && s.v < 25.0 && s.u > 0.1 && s.u < 1.0 {
            restricted_sum += resid;
            restricted_n += 1;
        }
    }
    let report = FitReport {
        sample_count: n,
        mean_abs_error: abs_sum / n as f64,
        rms_error: (sq_sum / n as f64).sqrt(),
        restricted_mean_abs_error: if restricted_n > 0 {
            restricted_sum / restricted_n as f64
        } else {
            0.0
        },
    };
    Ok((coeffs, report))
}
