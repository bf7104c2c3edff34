use super::{Matrix, NumericsError};

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factors a symmetric positive-definite matrix. Only the lower
    /// triangle of `a` is read.
    pub fn factor(a: &Matrix) -> Result<Self, NumericsError> {
        let n = a.rows();
        if a.cols() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "cholesky",
                left: a.shape(),
                right: (n, n),
            });
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a.get(j, j);
            for k in 0..j {
                diag -= l.get(j, k) * l.get(j, k);
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(NumericsError::NotPositiveDefinite { pivot: j, value: diag });
            }
            let ljj = diag.sqrt();
            l.set(j, j, ljj);
            for i in (j + 1)..n {
                let mut v = a.get(i, j);
                let (ri, rj) = (l.row(i), l.row(j));
                for k in 0..j {
                    v -= ri[k] * rj[k];
                }
                l.set(i, j, v / ljj);
            }
        }
        Ok(Self { l })
    }

    pub fn factor_matrix(&self) -> &Matrix {
        &self.l
    }

    /// Solves `A X = B` for every column of `B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix, NumericsError> {
        let n = self.l.rows();
        if b.rows() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "cholesky_solve",
                left: self.l.shape(),
                right: b.shape(),
            });
        }
        let m = b.cols();
        // Work on Bᵀ so each right-hand side is a contiguous row.
        let mut xt = b.transpose();
        let lt = self.l.transpose();
        for c in 0..m {
            let x = xt.row_mut(c);
            // forward: L y = b
            for i in 0..n {
                let li = self.l.row(i);
                let mut v = x[i];
                for k in 0..i {
                    v -= li[k] * x[k];
                }
                x[i] = v / li[i];
            }
            // backward: Lᵀ x = y
            for i in (0..n).rev() {
                let ui = lt.row(i);
                let mut v = x[i];
                for k in (i + 1)..n {
                    v -= ui[k] * x[k];
                }
                x[i] = v / ui[i];
            }
        }
        Ok(xt.transpose())
    }
}
