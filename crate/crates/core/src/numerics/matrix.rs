//! Dense row-major `f64` matrices.

use serde::{Deserialize, Serialize};

use super::NumericsError;

/// A dense matrix stored in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = NumericsError;

    fn try_from(raw: RawMatrix) -> Result<Self, Self::Error> {
        let m = Matrix::new(raw.rows, raw.cols, raw.data)?;
        if !m.is_finite() {
            return Err(NumericsError::NonFinite { op: "deserialize" });
        }
        Ok(m)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(NumericsError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericsError::BadLength {
                    rows: rows.len(),
                    cols,
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-column matrix.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Value of a 1×1 matrix.
    pub fn to_scalar(&self) -> Result<f64, NumericsError> {
        if self.shape() != (1, 1) {
            return Err(NumericsError::NotScalar { shape: self.shape() });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.cols {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_transposed",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix, NumericsError> {
        self.expect_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64, NumericsError> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub(crate) fn expect_same_shape(
        &self,
        other: &Matrix,
        op: &'static str,
    ) -> Result<(), NumericsError> {
        if self.shape() != other.shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(s: &Matrix) -> Matrix {
    let mut out = s.clone();
    for i in 0..s.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Scales every row to unit Euclidean norm. All-zero rows are rejected.
pub fn l2_normalize_rows(a: &Matrix) -> Result<Matrix, NumericsError> {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let norm = dot(a.row(i), a.row(i)).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(NumericsError::ZeroRow { row: i });
        }
        for v in out.row_mut(i) {
            *v /= norm;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        let r = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let c = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert_eq!(r.matmul(&c).unwrap(), Matrix::scalar(0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - acc).abs() < 1e-12);
            }
        }
        let bt = b.transpose();
        assert!(c.max_abs_diff(&a.matmul_transposed(&bt).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("2×3"), "{err}");
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = random(3, 5, &mut rng);
            let b = random(5, 4, &mut rng);
            let c = random(4, 2, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right).unwrap() < 1e-10);
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&Matrix::zeros(1, 3));
        for &v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_rows(&Matrix::from_rows(&[[2f64.ln(), 0.0]]).unwrap());
        assert!((p.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        // reference values from an arbitrary-precision evaluator
        let p = softmax_rows(&Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_6, 0.665_240_955_774_821_9];
        for (v, e) in p.as_slice().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random(4, 6, &mut rng);
        let mut shifted = s.clone();
        for i in 0..4 {
            let c = rng.random_range(-50.0..50.0);
            for v in shifted.row_mut(i) {
                *v += c;
            }
        }
        let a = softmax_rows(&s);
        let b = softmax_rows(&shifted);
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        for r in a.row_sums() {
            assert!((r - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_rows() {
        let n = l2_normalize_rows(&Matrix::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(0, 1) - 0.8).abs() < 1e-15);
        let again = l2_normalize_rows(&n).unwrap();
        assert!(again.max_abs_diff(&n).unwrap() < 1e-12);
        assert!(matches!(
            l2_normalize_rows(&Matrix::zeros(1, 2)),
            Err(NumericsError::ZeroRow { row: 0 })
        ));
    }

    #[test]
    fn deserialize_validates_length() {
        let bad = r#"{"rows":2,"cols":2,"data":[1.0,2.0,3.0]}"#;
        assert!(serde_json::from_str::<Matrix>(bad).is_err());
        let good = r#"{"rows":1,"cols":2,"data":[1.0,2.0]}"#;
        let m: Matrix = serde_json::from_str(good).unwrap();
        assert_eq!(m.shape(), (1, 2));
    }
}
