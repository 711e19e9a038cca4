//! Symmetric banded LDL^T factorization for the quasi-definite KKT systems
//! arising from horizon-structured QPs. No pivoting; quasi-definiteness of
//! the regularized KKT matrix guarantees the factorization exists.

/// Lower-banded symmetric matrix in band storage: `band[d][j]` holds entry
/// (j + d, j) for diagonals d = 0..=bandwidth. After [`Self::factorize`] the
/// storage holds the L and D factors in place.
pub struct BandMatrix {
    pub dim: usize,
    pub bandwidth: usize,
    band: Vec<Vec<f64>>,
}

impl BandMatrix {
    pub fn new(dim: usize, bandwidth: usize) -> Self {
        Self {
            dim,
            bandwidth,
            band: (0..=bandwidth).map(|_| vec![0.0; dim]).collect(),
        }
    }

    /// Accumulate into entry (i, j); only the lower triangle is stored, so
    /// callers pass each symmetric pair once with i >= j.
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i >= j && i - j <= self.bandwidth);
        self.band[i - j][j] += value;
    }

    pub fn reset(&mut self) {
        for diag in &mut self.band {
            diag.fill(0.0);
        }
    }

    /// In-place LDL^T. `signs[j]` gives the expected inertia sign of pivot j
    /// (+1 primal block, -1 dual block); near-zero pivots are nudged in that
    /// direction.
    pub fn factorize(&mut self, signs: &[i8]) {
        let n = self.dim;
        let bw = self.bandwidth;
        for j in 0..n {
            let start = j.saturating_sub(bw);
            let mut d = self.band[0][j];
            for k in start..j {
                let l_jk = self.band[j - k][k];
                d -= l_jk * l_jk * self.band[0][k];
            }
            if d.abs() < 1e-13 {
                d = signs[j] as f64 * 1e-11;
            }
            self.band[0][j] = d;
            let i_end = (j + bw).min(n - 1);
            for i in (j + 1)..=i_end {
                let start_i = i.saturating_sub(bw).max(start);
                let mut v = self.band[i - j][j];
                for k in start_i..j {
                    v -= self.band[i - k][k] * self.band[j - k][k] * self.band[0][k];
                }
                self.band[i - j][j] = v / d;
            }
        }
    }

    /// Solve K x = b in place; requires a prior [`Self::factorize`].
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        let bw = self.bandwidth;
        // forward: L y = b
        for j in 0..n {
            let yj = b[j];
            if yj != 0.0 {
                let i_end = (j + bw).min(n - 1);
                for i in (j + 1)..=i_end {
                    b[i] -= self.band[i - j][j] * yj;
                }
            }
        }
        // diagonal
        for j in 0..n {
            b[j] /= self.band[0][j];
        }
        // backward: L^T x = y
        for j in (0..n).rev() {
            let i_end = (j + bw).min(n - 1);
            let mut acc = b[j];
            for i in (j + 1)..=i_end {
                acc -= self.band[i - j][j] * b[i];
            }
            b[j] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn factor_solve_spd_tridiagonal() {
        // 1D Laplacian, dim 6
        let n = 6;
        let mut m = BandMatrix::new(n, 1);
        for j in 0..n {
            m.add(j, j, 2.0);
            if j + 1 < n {
                m.add(j + 1, j, -1.0);
            }
        }
        m.factorize(&vec![1i8; n]);
        let mut b = vec![1.0; n];
        m.solve_in_place(&mut b);
        for i in 0..n {
            let mut r = 2.0 * b[i];
            if i > 0 {
                r -= b[i - 1];
            }
            if i + 1 < n {
                r -= b[i + 1];
            }
            assert_relative_eq!(r, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn factor_solve_quasi_definite() {
        let n = 5;
        let mut m = BandMatrix::new(n, 2);
        let dense = [
            [2.0, 0.3, 0.5, 0.0, 0.0],
            [0.3, 2.5, 0.1, 0.4, 0.0],
            [0.5, 0.1, -1.0, 0.2, 0.6],
            [0.0, 0.4, 0.2, 3.0, 0.1],
            [0.0, 0.0, 0.6, 0.1, -2.0],
        ];
        for i in 0..n {
            for j in 0..=i {
                if dense[i][j] != 0.0 {
                    m.add(i, j, dense[i][j]);
                }
            }
        }
        m.factorize(&[1, 1, -1, 1, -1]);
        let rhs = [1.0, -2.0, 0.5, 3.0, -1.0];
        let mut x = rhs;
        m.solve_in_place(&mut x);
        for i in 0..n {
            let r: f64 = (0..n).map(|j| dense[i][j] * x[j]).sum();
            assert_relative_eq!(r, rhs[i], epsilon = 1e-10);
        }
    }
}
