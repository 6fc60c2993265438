//! Lower-triangular Cholesky factor that supports appending and deleting
//! variables in O(n²), used by the active-set solver to track the reduced
//! Hessian of the free variables.

#[derive(Debug, Clone, Default)]
pub(crate) struct UpdatableCholesky {
    // row i holds L[i][0..=i]
    rows: Vec<Vec<f64>>,
}

impl UpdatableCholesky {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// Append a variable whose covariance with the existing variables (in
    /// factor order) is `cross` and whose diagonal entry is `diag`.
    ///
    /// Returns `false` (and leaves the factor untouched) when the extended
    /// matrix is not numerically positive definite.
    pub fn append(&mut self, cross: &[f64], diag: f64, min_pivot: f64) -> bool {
        debug_assert_eq!(cross.len(), self.dim());
        let mut y = cross.to_vec();
        self.forward_in_place(&mut y);
        let rest = diag - y.iter().map(|v| v * v).sum::<f64>();
        if !(rest > min_pivot * min_pivot) {
            return false;
        }
        y.push(rest.sqrt());
        self.rows.push(y);
        true
    }

    /// Remove the variable at position `k` and restore the factor of the
    /// remaining variables with a rank-one update of the trailing block.
    pub fn delete(&mut self, k: usize) {
        let n = self.dim();
        assert!(k < n);
        self.rows.remove(k);
        // column k of the old trailing rows becomes the update vector
        let mut x: Vec<f64> = self.rows[k..].iter_mut().map(|row| row.remove(k)).collect();
        let m = n - 1 - k;
        for i in 0..m {
            let lii = self.rows[k + i][k + i];
            let r = lii.hypot(x[i]);
            let c = r / lii;
            let s = x[i] / lii;
            self.rows[k + i][k + i] = r;
            for j in (i + 1)..m {
                let lji = (self.rows[k + j][k + i] + s * x[j]) / c;
                x[j] = c * x[j] - s * lji;
                self.rows[k + j][k + i] = lji;
            }
        }
    }

    /// Solve L y = b in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = b[i];
            for (lij, bj) in row[..i].iter().zip(b.iter()) {
                acc -= lij * bj;
            }
            b[i] = acc / row[i];
        }
    }

    /// Solve Lᵀ x = y in place.
    pub fn backward_in_place(&self, y: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let xi = y[i] / self.rows[i][i];
            y[i] = xi;
            for (j, yj) in y.iter_mut().enumerate().take(i) {
                *yj -= self.rows[i][j] * xi;
            }
        }
    }

    #[cfg(test)]
    fn reconstruct(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let kmax = i.min(j);
                a[i][j] = (0..=kmax).map(|k| self.rows[i][k] * self.rows[j][k]).sum();
            }
        }
        a
    }
}
