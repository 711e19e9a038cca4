//! Operator-splitting (ADMM) convex QP solver with a banded KKT
//! factorization over the horizon block structure and an active-set polish
//! step that sharpens solutions to near machine precision.

use std::time::Instant;

use super::band::BandMatrix;
use super::{ConvexQp, QpSolution, SolveDiagnostics, SolveStatus, SolverConfig};

const SIGMA: f64 = 1e-6;
const ALPHA: f64 = 1.6;
const RHO_BASE: f64 = 0.1;
const RHO_EQ_SCALE: f64 = 1e3;
const CHECK_INTERVAL: usize = 25;
const RHO_ADAPT_INTERVAL: usize = 100;

/// KKT ordering: variables and constraint rows interleaved by horizon step.
struct KktOrder {
    /// KKT position of variable i.
    var_pos: Vec<usize>,
    /// KKT position of constraint row r.
    con_pos: Vec<usize>,
    bandwidth: usize,
    dim: usize,
    signs: Vec<i8>,
}

fn build_order(qp: &ConvexQp) -> KktOrder {
    let dim = qp.n + qp.m;
    let max_step = qp
        .var_step
        .iter()
        .chain(qp.con_step.iter())
        .copied()
        .max()
        .unwrap_or(0);
    let mut var_pos = vec![0usize; qp.n];
    let mut con_pos = vec![0usize; qp.m];
    let mut signs = vec![0i8; dim];
    let mut next = 0usize;
    for step in 0..=max_step {
        for (i, &s) in qp.var_step.iter().enumerate() {
            if s == step {
                var_pos[i] = next;
                signs[next] = 1;
                next += 1;
            }
        }
        for (r, &s) in qp.con_step.iter().enumerate() {
            if s == step {
                con_pos[r] = next;
                signs[next] = -1;
                next += 1;
            }
        }
    }
    debug_assert_eq!(next, dim);
    let mut bandwidth = 0usize;
    for &(i, j, _) in &qp.p_upper {
        bandwidth = bandwidth.max(var_pos[i].abs_diff(var_pos[j]));
    }
    for &(r, c, _) in &qp.a {
        bandwidth = bandwidth.max(con_pos[r].abs_diff(var_pos[c]));
    }
    KktOrder {
        var_pos,
        con_pos,
        bandwidth,
        dim,
        signs,
    }
}

fn assemble_kkt(qp: &ConvexQp, order: &KktOrder, rho: &[f64], kkt: &mut BandMatrix) {
    kkt.reset();
    for i in 0..qp.n {
        kkt.add(order.var_pos[i], order.var_pos[i], SIGMA);
    }
    for &(i, j, v) in &qp.p_upper {
        let (pi, pj) = (order.var_pos[i], order.var_pos[j]);
        let (hi, lo) = if pi >= pj { (pi, pj) } else { (pj, pi) };
        kkt.add(hi, lo, v);
    }
    for &(r, c, v) in &qp.a {
        let (pr, pc) = (order.con_pos[r], order.var_pos[c]);
        let (hi, lo) = if pr >= pc { (pr, pc) } else { (pc, pr) };
        kkt.add(hi, lo, v);
    }
    for r in 0..qp.m {
        kkt.add(order.con_pos[r], order.con_pos[r], -1.0 / rho[r]);
    }
}

fn inf_norm(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
}

/// Solve a convex QP. `warm_start` takes (x, y) from a previous related
/// solve; an identical problem re-solves in a couple of iterations.
pub fn solve_qp(
    qp: &ConvexQp,
    warm_start: Option<(&[f64], &[f64])>,
    config: &SolverConfig,
) -> (QpSolution, SolveDiagnostics) {
    let start = Instant::now();
    let order = build_order(qp);
    let mut rho: Vec<f64> = (0..qp.m)
        .map(|r| {
            if qp.is_equality(r) {
                RHO_BASE * RHO_EQ_SCALE
            } else {
                RHO_BASE
            }
        })
        .collect();
    let mut kkt = BandMatrix::new(order.dim, order.bandwidth);
    assemble_kkt(qp, &order, &rho, &mut kkt);
    kkt.factorize(&order.signs);

    let mut x = warm_start.map_or(vec![0.0; qp.n], |(x0, _)| x0.to_vec());
    let mut y = warm_start.map_or(vec![0.0; qp.m], |(_, y0)| y0.to_vec());
    let mut z = vec![0.0; qp.m];
    qp.a_mul(&x, &mut z);
    for i in 0..qp.m {
        z[i] = z[i].clamp(qp.l[i], qp.u[i]);
    }

    let mut rhs = vec![0.0; order.dim];
    let mut ax = vec![0.0; qp.m];
    let mut px = vec![0.0; qp.n];
    let mut aty = vec![0.0; qp.n];

    let eps_feas = config.feasibility_tolerance;
    let eps_opt = config.optimality_tolerance;
    let mut iterations = 0usize;
    let mut primal_res = f64::INFINITY;
    let mut dual_res = f64::INFINITY;
    let mut status = SolveStatus::MaxIterations;
    let mut rho_updates = 0usize;

    for k in 1..=config.max_iterations {
        iterations = k;
        // solve [P + sigma I, A'; A, -diag(1/rho)] [xt; nu] = [sigma x - q; z - y/rho]
        for i in 0..qp.n {
            rhs[order.var_pos[i]] = SIGMA * x[i] - qp.q[i];
        }
        for r in 0..qp.m {
            rhs[order.con_pos[r]] = z[r] - y[r] / rho[r];
        }
        kkt.solve_in_place(&mut rhs);

        for i in 0..qp.n {
            let xt = rhs[order.var_pos[i]];
            x[i] = ALPHA * xt + (1.0 - ALPHA) * x[i];
        }
        for r in 0..qp.m {
            let nu = rhs[order.con_pos[r]];
            let zt = z[r] + (nu - y[r]) / rho[r];
            let z_relaxed = ALPHA * zt + (1.0 - ALPHA) * z[r];
            let z_new = (z_relaxed + y[r] / rho[r]).clamp(qp.l[r], qp.u[r]);
            y[r] += rho[r] * (z_relaxed - z_new);
            z[r] = z_new;
        }

        let check = k <= 2 || k % CHECK_INTERVAL == 0 || k == config.max_iterations;
        if !check {
            continue;
        }

        qp.a_mul(&x, &mut ax);
        qp.p_mul(&x, &mut px);
        qp.at_mul(&y, &mut aty);
        primal_res = (0..qp.m).fold(0.0f64, |acc, i| acc.max((ax[i] - z[i]).abs()));
        dual_res = (0..qp.n).fold(0.0f64, |acc, i| acc.max((px[i] + qp.q[i] + aty[i]).abs()));
        let pri_scale = inf_norm(&ax).max(inf_norm(&z)).max(1.0);
        let dua_scale = inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&qp.q)).max(1.0);
        if primal_res <= eps_feas * pri_scale && dual_res <= eps_opt * dua_scale {
            status = SolveStatus::Optimal;
            break;
        }

        if let Some(limit) = config.time_limit_ms {
            if start.elapsed().as_secs_f64() * 1e3 > limit {
                status = SolveStatus::TimeLimit;
                break;
            }
        }

        // residual balancing: rescale rho when primal/dual progress diverges
        if k % RHO_ADAPT_INTERVAL == 0 && rho_updates < 12 {
            let ratio = (primal_res / pri_scale) / (dual_res / dua_scale).max(1e-16);
            if !(0.1..=10.0).contains(&ratio) {
                let scale = ratio.sqrt().clamp(1e-3, 1e3);
                for (r, rho_r) in rho.iter_mut().enumerate() {
                    let base = if qp.is_equality(r) {
                        RHO_BASE * RHO_EQ_SCALE
                    } else {
                        RHO_BASE
                    };
                    *rho_r = (*rho_r * scale).clamp(base * 1e-4, base * 1e4);
                }
                assemble_kkt(qp, &order, &rho, &mut kkt);
                kkt.factorize(&order.signs);
                rho_updates += 1;
            }
        }
    }

    if status == SolveStatus::Optimal {
        polish(qp, &order, &mut x, &mut y, eps_feas, &z);
        qp.a_mul(&x, &mut ax);
        qp.p_mul(&x, &mut px);
        qp.at_mul(&y, &mut aty);
        primal_res = {
            let mut r = 0.0f64;
            for i in 0..qp.m {
                r = r.max((qp.l[i] - ax[i]).max(ax[i] - qp.u[i]).max(0.0));
            }
            r
        };
        dual_res = (0..qp.n).fold(0.0f64, |acc, i| acc.max((px[i] + qp.q[i] + aty[i]).abs()));
    }

    let most_violated = if status == SolveStatus::Optimal {
        None
    } else {
        qp.a_mul(&x, &mut ax);
        Some(qp.worst_violation(&ax).0)
    };

    let diagnostics = SolveDiagnostics {
        status,
        iterations,
        primal_residual: primal_res,
        dual_residual: dual_res,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        most_violated_constraint: most_violated,
        exact_dynamics_residual: None,
    };
    let objective = qp.objective(&x);
    (QpSolution { x, y, objective }, diagnostics)
}

/// Solve the equality-constrained KKT system on the active set detected from
/// the ADMM iterate; accepted only when it improves the KKT residuals. Weakly
/// active rows carry near-zero duals, so detection also looks at the projected
/// constraint values, and rows a trial solution pushes out of bounds are pinned
/// and the system re-solved.
fn polish(qp: &ConvexQp, order: &KktOrder, x: &mut Vec<f64>, y: &mut Vec<f64>, eps_feas: f64, z: &[f64]) {
    // worst primal violation or stationarity defect, the acceptance measure
    let kkt_worst = |x: &[f64], y: &[f64]| -> f64 {
        let mut ax = vec![0.0; qp.m];
        let mut px = vec![0.0; qp.n];
        let mut aty = vec![0.0; qp.n];
        qp.a_mul(x, &mut ax);
        qp.p_mul(x, &mut px);
        qp.at_mul(y, &mut aty);
        let mut worst = 0.0f64;
        for i in 0..qp.m {
            worst = worst.max((qp.l[i] - ax[i]).max(ax[i] - qp.u[i]).max(0.0));
        }
        for i in 0..qp.n {
            worst = worst.max((px[i] + qp.q[i] + aty[i]).abs());
        }
        worst
    };

    // -1: pinned at l, +1: pinned at u, 0: free
    let mut pin = vec![0i8; qp.m];
    for r in 0..qp.m {
        if qp.is_equality(r) || y[r] < -1e-10 {
            pin[r] = -1;
        } else if y[r] > 1e-10 {
            pin[r] = 1;
        } else if qp.l[r].is_finite() && (z[r] - qp.l[r]).abs() <= 1e-9 * (1.0 + qp.l[r].abs()) {
            pin[r] = -1;
        } else if qp.u[r].is_finite() && (z[r] - qp.u[r]).abs() <= 1e-9 * (1.0 + qp.u[r].abs()) {
            pin[r] = 1;
        }
    }

    let old = kkt_worst(x, y);
    let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
    for _pass in 0..8 {
        let Some((cand_x, cand_y)) = solve_pinned(qp, order, &pin) else {
            break;
        };
        let new = kkt_worst(&cand_x, &cand_y);
        let improved = best.as_ref().map_or(true, |(_, _, b)| new < *b);
        if improved {
            best = Some((cand_x.clone(), cand_y.clone(), new));
        }
        if new <= eps_feas {
            break;
        }
        // refine the working set: pin rows the trial pushes out of bounds,
        // release inequality pins whose multiplier came back wrong-signed
        let mut ax = vec![0.0; qp.m];
        qp.a_mul(&cand_x, &mut ax);
        let mut changed = false;
        for r in 0..qp.m {
            if qp.is_equality(r) {
                continue;
            }
            if pin[r] == 0 {
                if ax[r] < qp.l[r] - 1e-11 * (1.0 + qp.l[r].abs()) {
                    pin[r] = -1;
                    changed = true;
                } else if ax[r] > qp.u[r] + 1e-11 * (1.0 + qp.u[r].abs()) {
                    pin[r] = 1;
                    changed = true;
                }
            } else if (pin[r] == -1 && cand_y[r] > 1e-9) || (pin[r] == 1 && cand_y[r] < -1e-9) {
                pin[r] = 0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if let Some((bx, by, bres)) = best {
        if bres <= old.max(eps_feas) {
            *x = bx;
            *y = by;
        }
    }
}

/// Equality-constrained KKT solve with the pinned rows as hard constraints.
fn solve_pinned(qp: &ConvexQp, order: &KktOrder, pin: &[i8]) -> Option<(Vec<f64>, Vec<f64>)> {
    const DELTA: f64 = 1e-9;
    let mut active = Vec::new();
    let mut active_rhs = Vec::new();
    for r in 0..qp.m {
        match pin[r] {
            -1 => {
                active.push(r);
                active_rhs.push(qp.l[r]);
            }
            1 => {
                active.push(r);
                active_rhs.push(qp.u[r]);
            }
            _ => {}
        }
    }
    let ma = active.len();
    let dim = qp.n + ma;

    // positions: keep variable ordering, splice active rows at their old spots
    let mut con_pos = vec![usize::MAX; qp.m];
    let mut entries: Vec<(usize, usize)> = (0..qp.n).map(|i| (order.var_pos[i], i)).collect();
    for (k, &r) in active.iter().enumerate() {
        entries.push((order.con_pos[r], qp.n + k));
    }
    entries.sort_unstable();
    let mut pos = vec![0usize; dim];
    let mut signs = vec![0i8; dim];
    for (new_pos, &(_, id)) in entries.iter().enumerate() {
        pos[id] = new_pos;
        signs[new_pos] = if id < qp.n { 1 } else { -1 };
    }
    for (k, &r) in active.iter().enumerate() {
        con_pos[r] = pos[qp.n + k];
    }

    let mut bandwidth = 0usize;
    for &(i, j, _) in &qp.p_upper {
        bandwidth = bandwidth.max(pos[i].abs_diff(pos[j]));
    }
    for &(r, c, _) in &qp.a {
        if con_pos[r] != usize::MAX {
            bandwidth = bandwidth.max(con_pos[r].abs_diff(pos[c]));
        }
    }

    let mut kkt = BandMatrix::new(dim, bandwidth);
    for i in 0..qp.n {
        kkt.add(pos[i], pos[i], DELTA);
    }
    for &(i, j, v) in &qp.p_upper {
        let (hi, lo) = if pos[i] >= pos[j] { (pos[i], pos[j]) } else { (pos[j], pos[i]) };
        kkt.add(hi, lo, v);
    }
    for &(r, c, v) in &qp.a {
        if con_pos[r] != usize::MAX {
            let (hi, lo) = if con_pos[r] >= pos[c] {
                (con_pos[r], pos[c])
            } else {
                (pos[c], con_pos[r])
            };
            kkt.add(hi, lo, v);
        }
    }
    for k in 0..ma {
        let p = pos[qp.n + k];
        kkt.add(p, p, -DELTA);
    }
    kkt.factorize(&signs);

    // unregularized residual-based refinement
    let apply_unreg = |sol: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        for &(i, j, v) in &qp.p_upper {
            out[pos[i]] += v * sol[pos[j]];
            if i != j {
                out[pos[j]] += v * sol[pos[i]];
            }
        }
        for &(r, c, v) in &qp.a {
            if con_pos[r] != usize::MAX {
                out[con_pos[r]] += v * sol[pos[c]];
                out[pos[c]] += v * sol[con_pos[r]];
            }
        }
    };

    let mut rhs = vec![0.0; dim];
    for i in 0..qp.n {
        rhs[pos[i]] = -qp.q[i];
    }
    for (k, _) in active.iter().enumerate() {
        rhs[pos[qp.n + k]] = active_rhs[k];
    }
    let rhs0 = rhs.clone();
    kkt.solve_in_place(&mut rhs);
    let mut residual = vec![0.0; dim];
    for _ in 0..2 {
        apply_unreg(&rhs, &mut residual);
        for i in 0..dim {
            residual[i] = rhs0[i] - residual[i];
        }
        kkt.solve_in_place(&mut residual);
        for i in 0..dim {
            rhs[i] += residual[i];
        }
    }
    if rhs.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let cand_x: Vec<f64> = (0..qp.n).map(|i| rhs[pos[i]]).collect();
    let mut cand_y = vec![0.0; qp.m];
    for (k, &r) in active.iter().enumerate() {
        cand_y[r] = rhs[pos[qp.n + k]];
    }
    Some((cand_x, cand_y))
}
