//! Wengert-list reverse-mode differentiation over matrix-valued nodes.
//!
//! Each primitive records its inputs and output value on the [`Tape`].
//! [`Tape::backward`] walks the record in reverse, visiting every node
//! once and accumulating vector–Jacobian products into [`Gradients`].

use super::matrix::{dot, softmax_in_place};
use super::{Matrix, NumericsError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransposed(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    NormalizeRows(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Diag(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Record of primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64, NumericsError> {
        self.value(v).to_scalar()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul_transposed(self.value(b))?;
        Ok(self.push(out, Op::MatMulTransposed(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds the 1×n row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (am, bm) = (self.value(a), self.value(bias));
        if bm.rows() != 1 || bm.cols() != am.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: am.shape(),
                right: bm.shape(),
            });
        }
        let mut out = am.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bm.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = super::softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row softmax over `supports[i]` only; every other entry is exactly 0.
    pub fn masked_softmax_rows(
        &mut self,
        a: Var,
        supports: &[Vec<usize>],
    ) -> Result<Var, NumericsError> {
        let logits = self.value(a);
        let (n, m) = logits.shape();
        if supports.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_softmax_rows",
                left: logits.shape(),
                right: (supports.len(), m),
            });
        }
        let mut out = Matrix::zeros(n, m);
        let mut buf = Vec::new();
        for (i, support) in supports.iter().enumerate() {
            buf.clear();
            for &j in support {
                if j >= m {
                    return Err(NumericsError::BadSupport { index: j, batch: m });
                }
                buf.push(logits.get(i, j));
            }
            softmax_in_place(&mut buf);
            for (&j, &p) in support.iter().zip(&buf) {
                out.set(i, j, p);
            }
        }
        Ok(self.push(out, Op::MaskedSoftmaxRows(a)))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let am = self.value(a);
        let norms: Vec<f64> = (0..am.rows()).map(|i| dot(am.row(i), am.row(i)).sqrt()).collect();
        if let Some(row) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
            return Err(NumericsError::ZeroRow { row });
        }
        let mut out = am.clone();
        for (i, &n) in norms.iter().enumerate() {
            for v in out.row_mut(i) {
                *v /= n;
            }
        }
        Ok(self.push(out, Op::NormalizeRows(a, norms)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).as_slice().iter().sum();
        self.push(Matrix::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let total: f64 = m.as_slice().iter().sum();
        let mean = total / m.len() as f64;
        self.push(Matrix::scalar(mean), Op::Mean(a))
    }

    /// Per-row sums as an n×1 column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = Matrix::column(&self.value(a).row_sums());
        self.push(out, Op::RowSum(a))
    }

    /// Diagonal of a square matrix as an n×1 column.
    pub fn diag(&mut self, a: Var) -> Result<Var, NumericsError> {
        let am = self.value(a);
        if am.rows() != am.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "diag",
                left: am.shape(),
                right: (am.rows(), am.rows()),
            });
        }
        let out = Matrix::column(&am.diagonal());
        Ok(self.push(out, Op::Diag(a)))
    }

    /// Gradients of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        let root_value = self.value(root);
        if root_value.shape() != (1, 1) {
            return Err(NumericsError::NotScalar {
                shape: root_value.shape(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let da = g.matmul_transposed(self.value(*b))?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulTransposed(a, b) => {
                    // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                    let da = g.matmul(self.value(*b))?;
                    let db = g.transpose().matmul(self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), "mul_grad", |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), "mul_grad", |x, y| x * y)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, v) in db.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::Exp(a) => {
                    let da = g.zip_map(&node.value, "exp_grad", |x, y| x * y)?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Log(a) => {
                    let da = g.zip_map(self.value(*a), "log_grad", |x, y| x / y)?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let da = g.zip_map(self.value(*a), "relu_grad", |x, y| {
                        if y > 0.0 {
                            x
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *a, da);
                }
                // The masked variant has exact zeros off-support, so the
                // dense formula already yields zero gradient there.
                Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                    let p = &node.value;
                    let mut da = Matrix::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let (pi, gi) = (p.row(i), g.row(i));
                        let inner = dot(pi, gi);
                        for (d, (&pv, &gv)) in da.row_mut(i).iter_mut().zip(pi.iter().zip(gi)) {
                            *d = pv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for (i, &n) in norms.iter().enumerate() {
                        let (yi, gi) = (y.row(i), g.row(i));
                        let inner = dot(yi, gi);
                        for (d, (&yv, &gv)) in da.row_mut(i).iter_mut().zip(yi.iter().zip(gi)) {
                            *d = (gv - yv * inner) / n;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let v = g.as_slice()[0] / (r * c) as f64;
                    accumulate(&mut grads, *a, Matrix::filled(r, c, v));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut da = Matrix::zeros(r, c);
                    for i in 0..r {
                        let gi = g.as_slice()[i];
                        da.row_mut(i).iter_mut().for_each(|d| *d = gi);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Diag(a) => {
                    let n = g.rows();
                    let mut da = Matrix::zeros(n, n);
                    for i in 0..n {
                        da.set(i, i, g.as_slice()[i]);
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
        }

        let shapes = self.nodes[..=root.0].iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for a leaf; zeros when the leaf did not influence the root.
    pub fn get(&self, v: Var) -> Matrix {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => {
                let (r, c) = self.shapes.get(v.0).copied().unwrap_or((0, 0));
                Matrix::zeros(r, c)
            }
        }
    }
}
