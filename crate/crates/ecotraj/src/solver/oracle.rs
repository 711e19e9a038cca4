//! Dense primal-dual interior-point reference solver. Shares no code with
//! the operator-splitting path; used as an independent oracle in tests.

use nalgebra::{DMatrix, DVector};

use super::{ConvexQp, QpSolution};

/// Solve a convex QP by a dense path-following interior-point method.
/// Returns `None` when the method fails to reach the requested tolerance.
pub fn solve_dense_reference(qp: &ConvexQp, tol: f64) -> Option<QpSolution> {
    let n = qp.n;
    let mut p = DMatrix::zeros(n, n);
    for &(i, j, v) in &qp.p_upper {
        p[(i, j)] += v;
        if i != j {
            p[(j, i)] += v;
        }
    }
    let q = DVector::from_column_slice(&qp.q);

    let mut a_dense = DMatrix::zeros(qp.m, n);
    for &(r, c, v) in &qp.a {
        a_dense[(r, c)] += v;
    }

    // split rows: equalities and one-sided inequalities c' x <= d
    let mut eq_rows = Vec::new();
    let mut ineq = Vec::new(); // (row, sign, bound): sign * a_r' x <= bound
    for r in 0..qp.m {
        if qp.is_equality(r) {
            eq_rows.push(r);
        } else {
            if qp.u[r].is_finite() {
                ineq.push((r, 1.0f64, qp.u[r]));
            }
            if qp.l[r].is_finite() {
                ineq.push((r, -1.0f64, -qp.l[r]));
            }
        }
    }
    let meq = eq_rows.len();
    let mi = ineq.len();

    let a_eq = DMatrix::from_fn(meq, n, |i, j| a_dense[(eq_rows[i], j)]);
    let b_eq = DVector::from_fn(meq, |i, _| qp.l[eq_rows[i]]);
    let c_mat = DMatrix::from_fn(mi, n, |i, j| ineq[i].1 * a_dense[(ineq[i].0, j)]);
    let d_vec = DVector::from_fn(mi, |i, _| ineq[i].2);

    let mut x = DVector::zeros(n);
    let mut lambda = DVector::zeros(meq);
    let mut s = DVector::from_fn(mi, |i, _| {
        let row_dot: f64 = (0..n).map(|j| c_mat[(i, j)] * x[j]).sum();
        (d_vec[i] - row_dot).max(1.0)
    });
    let mut z = DVector::from_element(mi, 1.0);

    let dim = n + meq + 2 * mi;
    for _ in 0..200 {
        let r_dual = &p * &x + &q + a_eq.transpose() * &lambda + c_mat.transpose() * &z;
        let r_eq = &a_eq * &x - &b_eq;
        let r_ineq = &c_mat * &x + &s - &d_vec;
        let mu = if mi > 0 { z.dot(&s) / mi as f64 } else { 0.0 };

        let feas = r_dual.amax().max(if meq > 0 { r_eq.amax() } else { 0.0 })
            .max(if mi > 0 { r_ineq.amax() } else { 0.0 });
        if feas <= tol && mu <= tol * 1e-2 {
            // map duals back to the two-sided row convention
            let mut y = vec![0.0; qp.m];
            for (k, &r) in eq_rows.iter().enumerate() {
                y[r] = lambda[k];
            }
            for (k, &(r, sign, _)) in ineq.iter().enumerate() {
                y[r] += sign * z[k];
            }
            let xs: Vec<f64> = x.iter().copied().collect();
            let objective = qp.objective(&xs);
            return Some(QpSolution { x: xs, y, objective });
        }

        // Newton system on [dx, dlambda, dz, ds]
        let mut k_mat = DMatrix::zeros(dim, dim);
        k_mat.view_mut((0, 0), (n, n)).copy_from(&p);
        if meq > 0 {
            k_mat
                .view_mut((0, n), (n, meq))
                .copy_from(&a_eq.transpose());
            k_mat.view_mut((n, 0), (meq, n)).copy_from(&a_eq);
        }
        if mi > 0 {
            k_mat
                .view_mut((0, n + meq), (n, mi))
                .copy_from(&c_mat.transpose());
            k_mat
                .view_mut((n + meq, 0), (mi, n))
                .copy_from(&c_mat);
            for i in 0..mi {
                k_mat[(n + meq + i, n + meq + mi + i)] = 1.0; // ds in row 3
                k_mat[(n + meq + mi + i, n + meq + i)] = s[i]; // S dz
                k_mat[(n + meq + mi + i, n + meq + mi + i)] = z[i]; // Z ds
            }
        }
        let lu = k_mat.lu();

        let assemble_rhs = |sigma_mu: f64| -> DVector<f64> {
            let mut rhs = DVector::zeros(dim);
            for i in 0..n {
                rhs[i] = -r_dual[i];
            }
            for i in 0..meq {
                rhs[n + i] = -r_eq[i];
            }
            for i in 0..mi {
                rhs[n + meq + i] = -r_ineq[i];
                rhs[n + meq + mi + i] = -(z[i] * s[i] - sigma_mu);
            }
            rhs
        };

        // affine step to pick the centering parameter
        let affine = lu.solve(&assemble_rhs(0.0))?;
        let step_len = |dz: &DVector<f64>, ds: &DVector<f64>| -> f64 {
            let mut alpha = 1.0f64;
            for i in 0..mi {
                if dz[i] < 0.0 {
                    alpha = alpha.min(-z[i] / dz[i]);
                }
                if ds[i] < 0.0 {
                    alpha = alpha.min(-s[i] / ds[i]);
                }
            }
            alpha
        };
        let dz_aff = DVector::from_fn(mi, |i, _| affine[n + meq + i]);
        let ds_aff = DVector::from_fn(mi, |i, _| affine[n + meq + mi + i]);
        let alpha_aff = step_len(&dz_aff, &ds_aff).min(1.0);
        let mu_aff = if mi > 0 {
            (0..mi)
                .map(|i| (z[i] + alpha_aff * dz_aff[i]) * (s[i] + alpha_aff * ds_aff[i]))
                .sum::<f64>()
                / mi as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).clamp(1e-8, 1.0) } else { 0.0 };

        let delta = lu.solve(&assemble_rhs(sigma * mu))?;
        let dz = DVector::from_fn(mi, |i, _| delta[n + meq + i]);
        let ds = DVector::from_fn(mi, |i, _| delta[n + meq + mi + i]);
        let alpha = (0.995 * step_len(&dz, &ds)).min(1.0);

        for i in 0..n {
            x[i] += alpha * delta[i];
        }
        for i in 0..meq {
            lambda[i] += alpha * delta[n + i];
        }
        for i in 0..mi {
            z[i] = (z[i] + alpha * dz[i]).max(1e-14);
            s[i] = (s[i] + alpha * ds[i]).max(1e-14);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matches_hand_solution() {
        // min (x-1)^2 + (y-2)^2 s.t. x + y <= 2, x >= 0
        let qp = ConvexQp {
            n: 2,
            m: 2,
            p_upper: vec![(0, 0, 2.0), (1, 1, 2.0)],
            q: vec![-2.0, -4.0],
            obj_const: 5.0,
            a: vec![(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0)],
            l: vec![f64::NEG_INFINITY, 0.0],
            u: vec![2.0, f64::INFINITY],
            var_step: vec![0, 0],
            con_step: vec![0, 0],
        };
        let sol = solve_dense_reference(&qp, 1e-9).unwrap();
        // projection of (1, 2) onto x + y <= 2: (0.5, 1.5)
        assert_relative_eq!(sol.x[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(sol.x[1], 1.5, epsilon = 1e-6);
        assert_relative_eq!(sol.objective, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn equality_and_bounds() {
        // min x^2 + y^2 s.t. x + y = 2, y <= 0.5 -> x = 1.5, y = 0.5
        let qp = ConvexQp {
            n: 2,
            m: 2,
            p_upper: vec![(0, 0, 2.0), (1, 1, 2.0)],
            q: vec![0.0, 0.0],
            obj_const: 0.0,
            a: vec![(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)],
            l: vec![2.0, f64::NEG_INFINITY],
            u: vec![2.0, 0.5],
            var_step: vec![0, 0],
            con_step: vec![0, 0],
        };
        let sol = solve_dense_reference(&qp, 1e-9).unwrap();
        assert_relative_eq!(sol.x[0], 1.5, epsilon = 1e-6);
        assert_relative_eq!(sol.x[1], 0.5, epsilon = 1e-6);
    }
}
