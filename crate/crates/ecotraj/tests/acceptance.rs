//! Acceptance suite: one test per acceptance criterion, each printing a
//! single pass/fail line (run with `--nocapture` to see them live).

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ecotraj::env::DrivingCycle;
use ecotraj::fuel::{
    self, fuel_rate_hat, fuel_rate_hat_derivatives, FuelCoefficients, GearOptSample,
};
use ecotraj::matrix::{comprehensive_csv, nlp_vs_qp_csv, run_matrix, MatrixReport, MatrixSpec};
use ecotraj::ocp::{build_nlp, build_qp, HorizonSpec};
use ecotraj::presets;
use ecotraj::sim::{metrics_from_totals, run_episode, ControlMethod, EgoState, EpisodeConfig};
use ecotraj::solver::{admm, nlp, oracle, sqp, SolveStatus, SolverConfig};
use ecotraj::vehicle::resistance_accel;

fn criterion(name: &str, body: impl FnOnce()) {
    let outcome = catch_unwind(AssertUnwindSafe(body));
    println!(
        "acceptance {name}: {}",
        if outcome.is_ok() { "PASS" } else { "FAIL" }
    );
    if let Err(cause) = outcome {
        resume_unwind(cause);
    }
}

fn horizon_spec(w: &presets::MethodWeights, params: &ecotraj::vehicle::VehicleParams, nt: usize) -> HorizonSpec {
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
        bounds: params.bounds,
        use_slope_prediction: true,
    }
}

fn matrix_spec(preset: &str, cycles: Vec<DrivingCycle>) -> MatrixSpec {
    let (params, fuel) = match preset {
        "Truck" => (presets::truck_params(), presets::truck_fuel_coefficients()),
        "Sedan" => (presets::sedan_params(), presets::sedan_fuel_coefficients()),
        other => panic!("unknown preset {other}"),
    };
    MatrixSpec {
        preset_name: preset.to_string(),
        params,
        fuel,
        cycles,
        roads: vec![
            ("flat".into(), presets::flat_profile()),
            ("rolling".into(), presets::rolling_profile()),
            ("steep".into(), presets::steep_profile()),
        ],
        methods: vec![ControlMethod::Qp, ControlMethod::Nlp],
        horizon_steps: vec![50],
        slope_prediction: vec![true],
        dt: 0.1,
        time_headway: presets::TIME_HEADWAY,
        d_init: presets::D_INIT,
        solver: SolverConfig::default(),
        qp_weights: presets::qp_weights(),
        sqp_weights: presets::sqp_weights(),
        nlp_weights: presets::nlp_weights(),
    }
}

/// Full comparison matrix for both presets, shared by the criteria that need
/// it so the episodes run once.
fn full_reports() -> &'static (MatrixReport, MatrixReport) {
    static REPORTS: OnceLock<(MatrixReport, MatrixReport)> = OnceLock::new();
    REPORTS.get_or_init(|| {
        let cycles = vec![
            presets::synthetic_highway_cycle(300.0, 0.1),
            presets::synthetic_urban_cycle(300.0, 0.1),
        ];
        let truck = run_matrix(&matrix_spec("Truck", cycles.clone())).expect("truck matrix runs");
        let sedan = run_matrix(&matrix_spec("Sedan", cycles)).expect("sedan matrix runs");
        (truck, sedan)
    })
}

fn liters_per_100km_over(report: &MatrixReport, agent: &str, road: Option<&str>) -> f64 {
    let mut fuel = 0.0;
    let mut distance = 0.0;
    for e in &report.episodes {
        if e.agent == agent && road.map_or(true, |r| e.road == r) {
            fuel += e.ego.fuel_consumption;
            distance += e.ego.travel_distance;
        }
    }
    assert!(distance > 0.0, "no episodes matched {agent}/{road:?}");
    fuel * 100.0 / distance
}

#[test]
fn criterion_1_metric_identity() {
    criterion("criterion 1 (metric identity)", || {
        let m = metrics_from_totals(20525.89, 123177.83, 13477.20, 0.0, 0, true).unwrap();
        assert!(
            (m.fuel_efficiency - 16.6636).abs() <= 5e-5,
            "fuel efficiency {} != 16.6636",
            m.fuel_efficiency
        );
        assert!(
            (m.average_speed - 9.1397).abs() <= 5e-5,
            "average speed {} != 9.1397",
            m.average_speed
        );
    });
}

#[test]
fn criterion_2_directional_fuel_saving() {
    criterion("criterion 2 (directional fuel saving)", || {
        let (truck, sedan) = full_reports();
        for (preset, report) in [("Truck", truck), ("Sedan", sedan)] {
            for road in ["flat", "rolling", "steep"] {
                let qp = liters_per_100km_over(report, &format!("{preset}-QP-5"), Some(road));
                let nlp = liters_per_100km_over(report, &format!("{preset}-NLP-5"), Some(road));
                assert!(
                    nlp < qp,
                    "{preset}/{road}: NLP {nlp:.4} not below QP {qp:.4} L/100km"
                );
            }
        }
        let qp = liters_per_100km_over(truck, "Truck-QP-5", None);
        let nlp = liters_per_100km_over(truck, "Truck-NLP-5", None);
        let improvement = (qp - nlp) / qp * 100.0;
        assert!(
            improvement >= 3.0,
            "truck aggregate improvement {improvement:.2}% below 3%"
        );
    });
}

#[test]
fn criterion_3_safety_gap_window() {
    criterion("criterion 3 (safety gap window)", || {
        let (truck, sedan) = full_reports();
        for report in [truck, sedan] {
            for e in &report.episodes {
                assert!(e.failure_step.is_none(), "{} on {}/{} failed", e.agent, e.road, e.cycle);
                assert!(e.ego.completed, "{} on {}/{} incomplete", e.agent, e.road, e.cycle);
                assert_eq!(
                    e.ego.constraint_violation_count, 0,
                    "{} on {}/{} violated the gap window",
                    e.agent, e.road, e.cycle
                );
            }
        }
    });
}

#[test]
fn criterion_4_solver_oracle_equivalence() {
    criterion("criterion 4 (solver oracle equivalence)", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x4A11CE);
        let params = presets::truck_params();
        let config = SolverConfig::default();
        for case in 0..200 {
            let nt = rng.gen_range(1..=10usize);
            let v0: f64 = rng.gen_range(2.0..25.0);
            let gap: f64 = rng.gen_range(20.0..85.0);
            let lead_v: f64 = (v0 + rng.gen_range(-2.0..2.0f64)).clamp(0.0, 27.0);
            let spec = horizon_spec(&presets::qp_weights(), &params, nt);
            let steps = nt + 1;
            let lead_s: Vec<f64> = (0..steps)
                .map(|i| gap + spec.time_headway * v0 + lead_v * spec.dt * i as f64)
                .collect();
            let x0 = EgoState {
                s: 0.0,
                v: v0,
                u: 0.0,
                a_v: 0.0,
                a_b: 0.0,
            };
            let problem = build_qp(&x0, &lead_s, &vec![lead_v; steps], &spec).unwrap();
            let qp = problem.to_convex_qp().unwrap();
            let (sol, diag) = admm::solve_qp(&qp, None, &config);
            assert_eq!(
                diag.status,
                SolveStatus::Optimal,
                "case {case}: banded solve not optimal"
            );
            let reference = oracle::solve_dense_reference(&qp, 1e-10)
                .unwrap_or_else(|| panic!("case {case}: oracle failed"));
            let scale = reference.objective.abs().max(1.0);
            assert!(
                (sol.objective - reference.objective).abs() / scale <= 1e-6,
                "case {case}: objective {} vs oracle {}",
                sol.objective,
                reference.objective
            );
        }
    });
}

#[test]
fn criterion_5_derivative_correctness() {
    criterion("criterion 5 (derivative correctness)", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xD1FF);
        let coeffs = presets::truck_params().derived_coeffs();
        let check = |label: &str, analytic: f64, fd: f64| {
            let err = (analytic - fd).abs() / analytic.abs().max(1.0);
            assert!(err < 1e-5, "{label}: analytic {analytic} vs FD {fd} (err {err:.2e})");
        };
        for i in 0..1000 {
            let fuel = if i % 2 == 0 {
                presets::truck_fuel_coefficients()
            } else {
                presets::sedan_fuel_coefficients()
            };
            let v: f64 = rng.gen_range(0.0..30.0);
            let u: f64 = rng.gen_range(0.0..9.0);
            let theta: f64 = rng.gen_range(-0.12..0.12);
            let hv = 1e-4 * v.abs().max(1.0);
            let hu = 1e-4 * u.abs().max(1.0);
            let ht = 1e-4;

            let d = fuel_rate_hat_derivatives(v, u, &fuel);
            let f = |v, u| fuel_rate_hat(v, u, &fuel);
            check("df/dv", d.df_dv, (f(v + hv, u) - f(v - hv, u)) / (2.0 * hv));
            check("df/du", d.df_du, (f(v, u + hu) - f(v, u - hu)) / (2.0 * hu));
            check(
                "d2f/dv2",
                d.d2f_dv2,
                (f(v + hv, u) - 2.0 * f(v, u) + f(v - hv, u)) / (hv * hv),
            );
            check(
                "d2f/du2",
                d.d2f_du2,
                (f(v, u + hu) - 2.0 * f(v, u) + f(v, u - hu)) / (hu * hu),
            );
            check(
                "d2f/dvdu",
                d.d2f_dvdu,
                (f(v + hv, u + hu) - f(v + hv, u - hu) - f(v - hv, u + hu) + f(v - hv, u - hu))
                    / (4.0 * hv * hu),
            );

            // longitudinal dynamics a_V = u - R(v, theta) - a_B: the only
            // nonlinearities live in the resistance term
            let r = |v, th| resistance_accel(v, th, &coeffs);
            check(
                "dR/dv",
                2.0 * coeffs.k1 * v,
                (r(v + hv, theta) - r(v - hv, theta)) / (2.0 * hv),
            );
            check(
                "dR/dtheta",
                -coeffs.k2 * theta.sin() + coeffs.k3 * theta.cos(),
                (r(v, theta + ht) - r(v, theta - ht)) / (2.0 * ht),
            );
            check(
                "d2R/dv2",
                2.0 * coeffs.k1,
                (r(v + hv, theta) - 2.0 * r(v, theta) + r(v - hv, theta)) / (hv * hv),
            );
        }
    });
}

#[test]
fn criterion_6_sqp_nlp_agreement() {
    criterion("criterion 6 (SQP/NLP agreement)", || {
        let params = presets::truck_params();
        let coeffs = params.derived_coeffs();
        let fuel = presets::truck_fuel_coefficients();
        let config = SolverConfig::default();
        let cases = [(12.0, 13.0, 40.0), (15.0, 15.0, 50.0), (8.0, 10.0, 70.0), (20.0, 18.0, 30.0)];
        for (v0, lead_v, gap) in cases {
            let mut w = presets::nlp_weights();
            w.w3 = 0.0;
            let spec = horizon_spec(&w, &params, 5);
            let lead_s: Vec<f64> = (0..6)
                .map(|i| gap + spec.time_headway * v0 + lead_v * spec.dt * i as f64)
                .collect();
            let x0 = EgoState {
                s: 0.0,
                v: v0,
                u: 0.0,
                a_v: 0.0,
                a_b: 0.0,
            };
            let slope = vec![0.0; 6];
            let problem =
                build_nlp(&x0, &lead_s, &vec![lead_v; 6], &slope, &coeffs, &fuel, &spec).unwrap();
            let (sqp_sol, sqp_diag) = sqp::solve_sqp(&problem, &config).unwrap();
            let (nlp_sol, nlp_diag) = nlp::solve_nlp(&problem, None, &config).unwrap();
            assert_eq!(sqp_diag.status, SolveStatus::Optimal, "case {v0}/{lead_v}/{gap}");
            assert_eq!(nlp_diag.status, SolveStatus::Optimal, "case {v0}/{lead_v}/{gap}");
            assert!(
                sqp_diag.iterations <= 5,
                "case {v0}/{lead_v}/{gap}: {} outer iterations",
                sqp_diag.iterations
            );
            let scale = nlp_sol.objective.abs().max(1.0);
            assert!(
                (sqp_sol.objective - nlp_sol.objective).abs() / scale <= 1e-4,
                "case {v0}/{lead_v}/{gap}: SQP {} vs NLP {}",
                sqp_sol.objective,
                nlp_sol.objective
            );
        }
    });
}

#[test]
fn criterion_7_fit_recovery() {
    criterion("criterion 7 (fit recovery)", || {
        // exact recovery from data synthesized by the model itself
        let truth = presets::truck_fuel_coefficients();
        let mut samples = Vec::new();
        for v in fuel::sample_grid(1.0, 28.0, 1.5) {
            for u in fuel::sample_grid(0.0, 2.5, 0.25) {
                samples.push(GearOptSample {
                    v,
                    u,
                    opt_fuel_rate: fuel_rate_hat(v, u, &truth),
                    opt_gear: 1,
                });
            }
        }
        let (fitted, _) = fuel::fit_fuel_model(&samples).unwrap();
        for (a, b) in truth.as_array().iter().zip(fitted.as_array().iter()) {
            assert!(
                (a - b).abs() <= 1e-8 * a.abs().max(1.0),
                "coefficient {a} recovered as {b}"
            );
        }

        // end-to-end on the synthetic engine map
        let map = presets::synthetic_truck_map();
        let params = presets::truck_params();
        let grid = fuel::optimize_gears(&map, &params, &fuel::default_v_range(), &fuel::default_a_range())
            .unwrap();
        let (_, report) = fuel::fit_fuel_model(&grid).unwrap();
        assert!(
            report.mean_abs_error <= 0.15,
            "map fit MAE {} ml/s above 0.15",
            report.mean_abs_error
        );
    });
}

#[test]
fn criterion_8_performance_envelope() {
    criterion("criterion 8 (performance envelope)", || {
        let params = presets::truck_params();
        let fuel: FuelCoefficients = presets::truck_fuel_coefficients();
        let mut averages = Vec::new();
        for method in [ControlMethod::Qp, ControlMethod::Nlp] {
            let w = match method {
                ControlMethod::Qp => presets::qp_weights(),
                _ => presets::nlp_weights(),
            };
            let config = EpisodeConfig {
                preset_name: "Truck".into(),
                method,
                spec: horizon_spec(&w, &params, 50),
                params: params.clone(),
                fuel,
                road: presets::rolling_profile(),
                cycle: presets::synthetic_highway_cycle(60.0, 0.1),
                solver: SolverConfig::default(),
            };
            let out = run_episode(&config).unwrap();
            assert!(out.failure_step.is_none(), "{method} episode failed");
            averages.push((method, out.ego.average_solve_time));
        }
        for (method, avg) in averages {
            let bound = match method {
                ControlMethod::Qp => 10.0,
                _ => 100.0,
            };
            assert!(avg < bound, "{method} average solve {avg:.2} ms above {bound} ms");
        }
    });
}

#[test]
fn criterion_9_determinism() {
    criterion("criterion 9 (determinism)", || {
        let cycles = vec![presets::synthetic_highway_cycle(60.0, 0.1)];
        let spec = matrix_spec("Truck", cycles);
        let first = run_matrix(&spec).unwrap();
        let second = run_matrix(&spec).unwrap();
        assert_eq!(
            comprehensive_csv(&first),
            comprehensive_csv(&second),
            "comprehensive.csv differs between identical runs"
        );
        assert_eq!(
            nlp_vs_qp_csv(&first),
            nlp_vs_qp_csv(&second),
            "nlp_vs_qp.csv differs between identical runs"
        );
    });
}
