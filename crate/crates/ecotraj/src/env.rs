//! Road slope/elevation profiles, driving-cycle ingestion for the leading
//! agent, and the leading/slope predictions consumed by the replanning loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("driving cycle parse error: {0}")]
    CycleParse(String),
    #[error("driving cycle has a negative speed at t = {0} s")]
    NegativeSpeed(f64),
    #[error("driving cycle time column is not strictly increasing at row {0}")]
    NonMonotoneTime(usize),
    #[error("invalid slope profile: {0}")]
    InvalidProfile(String),
}

/// Road grade model: a constant grade plus a mixture of sine components,
/// theta(s) = theta0 + sum a_g sin(2 pi s / l_w).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeProfile {
    /// Constant grade (rad).
    pub theta0: f64,
    /// (amplitude rad, wavelength m) pairs.
    pub components: Vec<(f64, f64)>,
    /// Initial elevation (m).
    pub h0: f64,
}

impl SlopeProfile {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.components.iter().any(|&(_, l)| !(l > 0.0)) {
            return Err(EnvError::InvalidProfile("wavelengths must be > 0".into()));
        }
        let reach: f64 =
            self.theta0.abs() + self.components.iter().map(|(a, _)| a.abs()).sum::<f64>();
        if reach >= std::f64::consts::FRAC_PI_2 {
            return Err(EnvError::InvalidProfile(
                "|theta0| + sum |a_g| must stay below pi/2".into(),
            ));
        }
        Ok(())
    }
}

/// Road grade at path coordinate `s`.
pub fn slope_at(s: f64, profile: &SlopeProfile) -> f64 {
    let mut theta = profile.theta0;
    for &(amplitude, wavelength) in &profile.components {
        theta += amplitude * (2.0 * std::f64::consts::PI * s / wavelength).sin();
    }
    theta
}

/// Elevation at `s`: h0 plus the trapezoid integral of tan(theta) from 0,
/// with step <= 1 m. Reporting-only accuracy.
pub fn elevation_at(s: f64, profile: &SlopeProfile) -> f64 {
    if s <= 0.0 {
        return profile.h0;
    }
    let steps = s.ceil() as usize;
    let ds = s / steps as f64;
    let mut h = profile.h0;
    let mut prev = slope_at(0.0, profile).tan();
    for i in 1..=steps {
        let next = slope_at(i as f64 * ds, profile).tan();
        h += 0.5 * (prev + next) * ds;
        prev = next;
    }
    h
}

/// Leading agent state [s_l, v_l, a_Vl].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadState {
    pub s: f64,
    pub v: f64,
    pub a: f64,
}

/// A time-indexed speed profile for the leading agent, resampled to the
/// simulation timestep with derived distance and acceleration series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingCycle {
    pub name: String,
    /// Sample interval (s).
    pub timestep: f64,
    pub speeds: Vec<f64>,
    /// Cumulative trapezoid integral of the speed series (m).
    pub distances: Vec<f64>,
    /// Forward finite difference of the speed series (m/s^2).
    pub accelerations: Vec<f64>,
}

impl DrivingCycle {
    pub fn from_speeds(name: &str, timestep: f64, speeds: Vec<f64>) -> Result<Self, EnvError> {
        if speeds.len() < 2 {
            return Err(EnvError::CycleParse("need at least 2 samples".into()));
        }
        if let Some(i) = speeds.iter().position(|&v| v < 0.0) {
            return Err(EnvError::NegativeSpeed(i as f64 * timestep));
        }
        let mut distances = Vec::with_capacity(speeds.len());
        distances.push(0.0);
        for w in speeds.windows(2) {
            let d = distances.last().unwrap() + 0.5 * (w[0] + w[1]) * timestep;
            distances.push(d);
        }
        let mut accelerations: Vec<f64> =
            speeds.windows(2).map(|w| (w[1] - w[0]) / timestep).collect();
        accelerations.push(*accelerations.last().unwrap_or(&0.0));
        Ok(Self {
            name: name.to_string(),
            timestep,
            speeds,
            distances,
            accelerations,
        })
    }

    /// Number of steps (samples - 1).
    pub fn steps(&self) -> usize {
        self.speeds.len() - 1
    }

    pub fn duration(&self) -> f64 {
        self.steps() as f64 * self.timestep
    }

    pub fn total_distance(&self) -> f64 {
        *self.distances.last().unwrap()
    }

    /// Leading state at step index `i`.
    pub fn lead_state(&self, i: usize) -> LeadState {
        LeadState {
            s: self.distances[i],
            v: self.speeds[i],
            a: self.accelerations[i],
        }
    }

    /// Concatenate `repeat` copies of the cycle back to back. Distances keep
    /// accumulating; the seam speed jump is bridged by the resampler's
    /// finite-difference acceleration.
    pub fn repeated(&self, repeat: usize) -> Self {
        if repeat <= 1 {
            return self.clone();
        }
        let mut speeds = self.speeds.clone();
        for _ in 1..repeat {
            speeds.extend_from_slice(&self.speeds[1..]);
        }
        Self::from_speeds(&self.name, self.timestep, speeds).expect("valid repeat")
    }
}

/// Parse a two-column `time_s,speed_m_s` CSV and resample it to `dt`.
pub fn load_driving_cycle(name: &str, csv: &str, dt: f64) -> Result<DrivingCycle, EnvError> {
    let mut times = Vec::new();
    let mut speeds = Vec::new();
    for (row, line) in csv.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if row == 0 && line.chars().any(|c| c.is_ascii_alphabetic()) {
            continue; // header
        }
        let mut cells = line.split(',');
        let parse = |c: Option<&str>| -> Result<f64, EnvError> {
            c.and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| EnvError::CycleParse(format!("bad row {row}: {line:?}")))
        };
        let t = parse(cells.next())?;
        let v = parse(cells.next())?;
        if v < 0.0 {
            return Err(EnvError::NegativeSpeed(t));
        }
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(EnvError::NonMonotoneTime(row));
            }
        }
        times.push(t);
        speeds.push(v);
    }
    if times.len() < 2 {
        return Err(EnvError::CycleParse("need at least 2 rows".into()));
    }
    // linear resample onto the simulation timestep
    let t_end = *times.last().unwrap();
    let steps = (t_end / dt).floor() as usize;
    let mut resampled = Vec::with_capacity(steps + 1);
    let mut j = 0usize;
    for i in 0..=steps {
        let t = i as f64 * dt;
        while j + 1 < times.len() && times[j + 1] < t {
            j += 1;
        }
        let (t0, t1) = (times[j], times[(j + 1).min(times.len() - 1)]);
        let (v0, v1) = (speeds[j], speeds[(j + 1).min(times.len() - 1)]);
        let v = if t1 > t0 {
            let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            v0 * (1.0 - w) + v1 * w
        } else {
            v0
        };
        resampled.push(v);
    }
    DrivingCycle::from_speeds(name, dt, resampled)
}

/// Constant-acceleration rollout of the leading agent over the horizon.
/// Speed clamps at zero; distance advances by the trapezoid of speed.
/// Element 0 equals the current state exactly.
pub fn predict_leading(lead: &LeadState, horizon_steps: usize, dt: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = horizon_steps + 1;
    let mut s = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    s.push(lead.s);
    v.push(lead.v.max(0.0));
    a.push(lead.a);
    for i in 1..n {
        let v_prev = v[i - 1];
        let v_next = (v_prev + lead.a * dt).max(0.0);
        s.push(s[i - 1] + 0.5 * (v_prev + v_next) * dt);
        v.push(v_next);
        a.push(lead.a);
    }
    (s, v, a)
}

/// Element-wise slope over a position reference.
pub fn predict_slope_sequence(s_ref: &[f64], profile: &SlopeProfile) -> Vec<f64> {
    s_ref.iter().map(|&s| slope_at(s, profile)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_relative_eq;

    #[test]
    fn slope_flat_and_rolling() {
        let flat = presets::flat_profile();
        assert_eq!(slope_at(12345.0, &flat), 0.0);

        let rolling = presets::rolling_profile();
        assert_eq!(slope_at(0.0, &rolling), 0.0);

        // 0.05 sin(2 pi 80/320) + 0.025 sin(2 pi 80/210)
        let s = 80.0;
        let expect = 0.05 * (2.0 * std::f64::consts::PI * s / 320.0).sin()
            + 0.025 * (2.0 * std::f64::consts::PI * s / 210.0).sin();
        assert_relative_eq!(slope_at(s, &rolling), expect, epsilon = 1e-15);
        // hand value: 0.05*sin(pi/2) + 0.025*sin(2.39359) = 0.05 + 0.0170043
        assert_relative_eq!(expect, 0.0670043, max_relative = 1e-4);
    }

    #[test]
    fn slope_periodicity() {
        let single = SlopeProfile {
            theta0: 0.01,
            components: vec![(0.03, 1500.0)],
            h0: 0.0,
        };
        for l in 1..5 {
            let s = 333.3;
            assert_relative_eq!(
                slope_at(s + 1500.0 * l as f64, &single),
                slope_at(s, &single),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn elevation_flat_and_constant_grade() {
        let flat = presets::flat_profile();
        assert_eq!(elevation_at(800.0, &flat), 0.0);

        let grade = SlopeProfile {
            theta0: 0.02,
            components: vec![],
            h0: 5.0,
        };
        assert_relative_eq!(
            elevation_at(1000.0, &grade) - 5.0,
            1000.0 * 0.02f64.tan(),
            max_relative = 1e-9
        );
    }

    #[test]
    fn elevation_cancels_over_full_wavelength() {
        let profile = SlopeProfile {
            theta0: 0.0,
            components: vec![(0.04, 500.0)],
            h0: 0.0,
        };
        // fine-step quadrature oracle
        let fine = {
            let n = 200_000;
            let ds = 500.0 / n as f64;
            let mut h = 0.0;
            for i in 0..n {
                let s0 = i as f64 * ds;
                h += 0.5 * (slope_at(s0, &profile).tan() + slope_at(s0 + ds, &profile).tan()) * ds;
            }
            h
        };
        let coarse = elevation_at(500.0, &profile);
        assert!((coarse - fine).abs() < 1e-3 * 500.0 * 0.04);
        assert!(coarse.abs() < 1e-3 * 500.0 * 0.04);
    }

    #[test]
    fn elevation_monotone_on_positive_grade() {
        let grade = SlopeProfile {
            theta0: 0.03,
            components: vec![(0.01, 900.0)],
            h0: 0.0,
        };
        let mut prev = grade.h0;
        for i in 1..50 {
            let h = elevation_at(i as f64 * 40.0, &grade);
            assert!(h >= prev);
            prev = h;
        }
    }

    #[test]
    fn cycle_constant_speed() {
        let mut csv = String::from("time_s,speed_m_s\n");
        for i in 0..=10 {
            csv.push_str(&format!("{},10.0\n", i));
        }
        let cycle = load_driving_cycle("const", &csv, 0.1).unwrap();
        assert_relative_eq!(cycle.total_distance(), 100.0, epsilon = 1e-9);
        assert!(cycle.accelerations.iter().all(|&a| a.abs() < 1e-12));
    }

    #[test]
    fn cycle_ramp() {
        let mut csv = String::from("time_s,speed_m_s\n");
        for i in 0..=10 {
            csv.push_str(&format!("{},{}\n", i, i));
        }
        let cycle = load_driving_cycle("ramp", &csv, 0.1).unwrap();
        assert_relative_eq!(cycle.total_distance(), 50.0, epsilon = 1e-6);
        for &a in &cycle.accelerations[..cycle.accelerations.len() - 1] {
            assert_relative_eq!(a, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn cycle_rejects_negative_speed() {
        let csv = "time_s,speed_m_s\n0,5\n1,-1\n2,5\n";
        assert!(matches!(
            load_driving_cycle("bad", csv, 0.1),
            Err(EnvError::NegativeSpeed(_))
        ));
    }

    #[test]
    fn cycle_rejects_non_monotone_time() {
        let csv = "time_s,speed_m_s\n0,5\n2,6\n1,5\n";
        assert!(matches!(
            load_driving_cycle("bad", csv, 0.1),
            Err(EnvError::NonMonotoneTime(_))
        ));
    }

    #[test]
    fn resample_preserves_distance() {
        // original 1 Hz resolution vs 0.1 s resample
        let mut csv = String::from("time_s,speed_m_s\n");
        for i in 0..=120 {
            let v = 10.0 + 5.0 * ((i as f64) * 0.3).sin().abs();
            csv.push_str(&format!("{},{}\n", i, v));
        }
        let original = load_driving_cycle("orig", &csv, 1.0).unwrap();
        let fine = load_driving_cycle("fine", &csv, 0.1).unwrap();
        let rel = (fine.total_distance() - original.total_distance()).abs()
            / original.total_distance();
        assert!(rel < 1e-3, "relative distance drift {rel}");
    }

    #[test]
    fn predict_leading_cases() {
        let (s, v, _) = predict_leading(&LeadState { s: 0.0, v: 10.0, a: 0.0 }, 10, 0.1);
        assert_relative_eq!(*s.last().unwrap(), 10.0, epsilon = 1e-12);
        assert!(v.iter().all(|&x| x == 10.0));

        let (s, v, _) = predict_leading(&LeadState { s: 0.0, v: 10.0, a: 1.0 }, 10, 0.1);
        assert_relative_eq!(v[1], 10.1, epsilon = 1e-12);
        assert_relative_eq!(s[1], 1.005, epsilon = 1e-12);

        let (_, v, _) = predict_leading(&LeadState { s: 0.0, v: 0.05, a: -1.0 }, 10, 0.1);
        assert_eq!(v[1], 0.0);
        assert!(v[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn slope_sequence_modes() {
        let flat = presets::flat_profile();
        let s_ref: Vec<f64> = (0..=10).map(|i| i as f64 * 50.0).collect();
        assert!(predict_slope_sequence(&s_ref, &flat).iter().all(|&g| g == 0.0));

        let grade = SlopeProfile {
            theta0: 0.02,
            components: vec![],
            h0: 0.0,
        };
        assert!(predict_slope_sequence(&s_ref, &grade)
            .iter()
            .all(|&g| g == 0.02));
    }

    #[test]
    fn profile_validation() {
        assert!(SlopeProfile {
            theta0: 1.5,
            components: vec![(0.2, 100.0)],
            h0: 0.0
        }
        .validate()
        .is_err());
        assert!(SlopeProfile {
            theta0: 0.0,
            components: vec![(0.1, -5.0)],
            h0: 0.0
        }
        .validate()
        .is_err());
        presets::steep_profile().validate().unwrap();
    }
}
