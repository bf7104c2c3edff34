//! Dense fairness-aware attention.
//!
//! Attention is computed over protected attributes only; its output
//! weights the raw similarity matrix row by row:
//!
//! ```text
//! p_ij = softmax_j((W_Q z_i)ᵀ (W_K z_j) / rho)
//! o_i  = Σ_j p_ij · U_ij
//! ```
//!
//! There is intentionally no value projection: `U` enters unprojected.
//! [`kde_conditional_score`] evaluates the Gaussian kernel density
//! estimate the attention form reduces from, and serves as an oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, softmax_rows, Matrix, NumericsError, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub rho: f64,
}

impl AttentionParams {
    pub fn new(w_q: Matrix, w_k: Matrix, rho: f64) -> Result<Self> {
        let p = Self { w_q, w_k, rho };
        p.validate()?;
        Ok(p)
    }

    /// `W_Q = W_K = I`, the projection under which attention equals the KDE.
    pub fn identity(d_z: usize, rho: f64) -> Result<Self> {
        Self::new(Matrix::identity(d_z), Matrix::identity(d_z), rho)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_q.shape() != self.w_k.shape() {
            return Err(Error::Invalid(format!(
                "W_Q {}×{} and W_K {}×{} differ in shape",
                self.w_q.rows(),
                self.w_q.cols(),
                self.w_k.rows(),
                self.w_k.cols()
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Invalid(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    pub fn d_z(&self) -> usize {
        self.w_q.rows()
    }
}

/// How attention parameters are initialized for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    #[serde(default = "default_d_k")]
    pub d_k: usize,
    /// Attention temperature; `None` means `sqrt(d_k)`.
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default = "default_true")]
    pub normalize_protected: bool,
}

fn default_d_k() -> usize {
    16
}

fn default_true() -> bool {
    true
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_k: default_d_k(),
            rho: None,
            normalize_protected: true,
        }
    }
}

impl AttentionConfig {
    pub fn rho(&self) -> f64 {
        self.rho.unwrap_or_else(|| (self.d_k as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 {
            return Err(Error::Config("attention d_k must be positive".into()));
        }
        if !(self.rho() > 0.0 && self.rho().is_finite()) {
            return Err(Error::Config(format!("attention rho must be positive, got {}", self.rho())));
        }
        Ok(())
    }

    /// Projections with entries of standard deviation `1/sqrt(d_z)`.
    pub fn init(&self, d_z: usize, seed: u64) -> Result<AttentionParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = 1.0 / (d_z as f64).sqrt();
        let mut draw = || {
            let data = (0..d_z * self.d_k)
                .map(|_| { let v: f64 = StandardNormal.sample(&mut rng); sd * v })
                .collect();
            Matrix::new(d_z, self.d_k, data).expect("sized")
        };
        let w_q = draw();
        let w_k = draw();
        AttentionParams::new(w_q, w_k, self.rho())
    }
}

/// Row-stochastic `b×b` attention scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(pub(crate) Matrix);

impl AttentionMap {
    /// Wraps a matrix after checking rows are nonnegative and sum to one.
    pub fn new(p: Matrix) -> Result<Self> {
        if p.rows() != p.cols() {
            return Err(Error::Invalid("attention map must be square".into()));
        }
        for (i, s) in p.row_sums().iter().enumerate() {
            if (s - 1.0).abs() > 1e-9 || p.row(i).iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Invalid(format!("attention row {i} is not a distribution")));
            }
        }
        Ok(Self(p))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdeConfig {
    pub sigma: f64,
}

/// Protected rows as fed to attention: optionally scaled to unit norm.
pub fn prepare_protected(z: &Matrix, normalize: bool) -> Result<Matrix> {
    if normalize {
        Ok(l2_normalize_rows(z)?)
    } else {
        Ok(z.clone())
    }
}

/// Scaled query–key logits `(Z W_Q)(Z W_K)ᵀ / rho`.
pub fn attention_logits(z: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    params.validate()?;
    let q = z.matmul(&params.w_q)?;
    let k = z.matmul(&params.w_k)?;
    Ok(q.matmul_transposed(&k)?.scale(1.0 / params.rho))
}

pub fn attention_scores(z: &Matrix, params: &AttentionParams) -> Result<AttentionMap> {
    Ok(AttentionMap(softmax_rows(&attention_logits(z, params)?)))
}

/// Differentiable logits; `w_q`, `w_k` and `z` are tape nodes.
pub fn attention_logits_var(tape: &mut Tape, z: Var, w_q: Var, w_k: Var, rho: f64) -> Result<Var> {
    let q = tape.matmul(z, w_q)?;
    let k = tape.matmul(z, w_k)?;
    let s = tape.matmul_transposed(q, k)?;
    Ok(tape.scale(s, 1.0 / rho))
}

pub fn attention_scores_var(tape: &mut Tape, z: Var, w_q: Var, w_k: Var, rho: f64) -> Result<Var> {
    let s = attention_logits_var(tape, z, w_q, w_k, rho)?;
    Ok(tape.softmax_rows(s))
}

/// `o_i = Σ_j P_ij U_ij`: an elementwise product reduced per row.
pub fn fare(u: &SimilarityMatrix, p: &AttentionMap) -> Result<Vec<f64>> {
    let (u, p) = (u.matrix(), p.matrix());
    if u.shape() != p.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "fare",
            left: u.shape(),
            right: p.shape(),
        }
        .into());
    }
    Ok((0..u.rows())
        .map(|i| u.row(i).iter().zip(p.row(i)).map(|(a, b)| a * b).sum())
        .collect())
}

pub fn fare_var(tape: &mut Tape, u: Var, p: Var) -> Result<Var> {
    let weighted = tape.mul(p, u)?;
    Ok(tape.row_sum(weighted))
}

/// Gaussian-KDE conditional score with explicit densities:
/// `o_i = Σ_j U_ij φ(z_i − z_j) / Σ_j φ(z_i − z_j)`.
pub fn kde_conditional_score(u: &SimilarityMatrix, z: &Matrix, cfg: &KdeConfig) -> Result<Vec<f64>> {
    if !(cfg.sigma > 0.0) {
        return Err(Error::Invalid(format!("sigma must be positive, got {}", cfg.sigma)));
    }
    let u = u.matrix();
    if u.rows() != z.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "kde_conditional_score",
            left: u.shape(),
            right: z.shape(),
        }
        .into());
    }
    let w = crate::kernels::gaussian_weights(z, cfg.sigma)?;
    Ok((0..u.rows())
        .map(|i| {
            let (num, den) = u
                .row(i)
                .iter()
                .zip(w.row(i))
                .fold((0.0, 0.0), |(n, d), (uv, wv)| (n + uv * wv, d + wv));
            num / den
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, GradCheckOptions};
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_u(b: usize, rng: &mut ChaCha8Rng) -> SimilarityMatrix {
        SimilarityMatrix::new(random(b, b, rng).map(|c| (c / 0.5).exp())).unwrap()
    }

    #[test]
    fn single_sample_attends_to_itself() {
        let z = Matrix::from_rows(&[[0.3, 0.4]]).unwrap();
        let p = attention_scores(&z, &AttentionParams::identity(2, 1.0).unwrap()).unwrap();
        assert_eq!(p.matrix(), &Matrix::scalar(1.0));
    }

    #[test]
    fn equal_rows_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Matrix::from_rows(&[[0.2, -0.5, 0.9]; 5]).unwrap();
        let params = AttentionConfig::default().init(3, 4).unwrap();
        let p = attention_scores(&z, &params).unwrap();
        for &v in p.matrix().as_slice() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let u = random_u(5, &mut rng);
        let o = fare(&u, &p).unwrap();
        for (i, oi) in o.iter().enumerate() {
            let mean: f64 = u.matrix().row(i).iter().sum::<f64>() / 5.0;
            assert!((oi - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_pair_attention() {
        let z = Matrix::identity(2);
        let p = attention_scores(&z, &AttentionParams::identity(2, 1.0).unwrap()).unwrap();
        let e = 1f64.exp();
        assert!((p.matrix().get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.matrix().get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn fare_examples() {
        let u = SimilarityMatrix::new(Matrix::scalar(5.0)).unwrap();
        let p = AttentionMap::new(Matrix::scalar(1.0)).unwrap();
        assert_eq!(fare(&u, &p).unwrap(), vec![5.0]);

        let u = SimilarityMatrix::new(Matrix::from_rows(&[[1.0, 3.0], [2.0, 4.0]]).unwrap()).unwrap();
        let p = AttentionMap::new(Matrix::filled(2, 2, 0.5)).unwrap();
        assert_eq!(fare(&u, &p).unwrap(), vec![2.0, 3.0]);

        let p3 = AttentionMap::new(Matrix::filled(3, 3, 1.0 / 3.0)).unwrap();
        assert!(fare(&u, &p3).is_err());
    }

    #[test]
    fn fare_matches_brute_force_and_stays_in_row_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = random(4, 3, &mut rng);
        let params = AttentionConfig { d_k: 5, rho: Some(0.7), normalize_protected: false }
            .init(3, 2)
            .unwrap();
        let p = attention_scores(&z, &params).unwrap();
        let u = random_u(4, &mut rng);
        let o = fare(&u, &p).unwrap();
        for i in 0..4 {
            let mut acc = 0.0;
            for j in 0..4 {
                acc += p.matrix().get(i, j) * u.matrix().get(i, j);
            }
            assert!((o[i] - acc).abs() < 1e-14);
            let row = u.matrix().row(i);
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(o[i] >= lo && o[i] <= hi);
        }
    }

    #[test]
    fn kde_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_u(4, &mut rng);
        let means: Vec<f64> = u.matrix().row_sums().iter().map(|s| s / 4.0).collect();

        let same = Matrix::from_rows(&[[0.1, 0.7]; 4]).unwrap();
        let o = kde_conditional_score(&u, &same, &KdeConfig { sigma: 0.3 }).unwrap();
        for (a, b) in o.iter().zip(&means) {
            assert!((a - b).abs() < 1e-12);
        }
        let distinct = random(4, 2, &mut rng);
        let o = kde_conditional_score(&u, &distinct, &KdeConfig { sigma: 1e6 }).unwrap();
        for (a, b) in o.iter().zip(&means) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn kde_equals_identity_attention_on_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let z = l2_normalize_rows(&random(8, 3, &mut rng)).unwrap();
            let u = random_u(8, &mut rng);
            let rho: f64 = 0.4;
            let kde = kde_conditional_score(&u, &z, &KdeConfig { sigma: rho.sqrt() }).unwrap();
            let att = fare(&u, &attention_scores(&z, &AttentionParams::identity(3, rho).unwrap()).unwrap()).unwrap();
            for (a, b) in kde.iter().zip(&att) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = 6;
        let z = random(b, 3, &mut rng);
        let u = random_u(b, &mut rng);
        let params = AttentionConfig::default().init(3, 1).unwrap();
        let o = fare(&u, &attention_scores(&z, &params).unwrap()).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let zp = z.select_rows(&perm);
        let mut up = Matrix::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                up.set(i, j, u.matrix().get(perm[i], perm[j]));
            }
        }
        let op = fare(&SimilarityMatrix::new(up).unwrap(), &attention_scores(&zp, &params).unwrap()).unwrap();
        for i in 0..b {
            assert!((op[i] - o[perm[i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_shift_leaves_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random(5, 3, &mut rng);
        let params = AttentionConfig::default().init(3, 3).unwrap();
        let logits = attention_logits(&z, &params).unwrap();
        let mut shifted = logits.clone();
        for i in 0..5 {
            let c = rng.random_range(-20.0..20.0);
            shifted.row_mut(i).iter_mut().for_each(|v| *v += c);
        }
        let (p, ps) = (softmax_rows(&logits), softmax_rows(&shifted));
        assert!(p.max_abs_diff(&ps).unwrap() < 1e-12);
        let u = random_u(5, &mut rng);
        let (a, b) = (
            fare(&u, &AttentionMap(p)).unwrap(),
            fare(&u, &AttentionMap(ps)).unwrap(),
        );
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_through_attention_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = AttentionConfig { d_k: 4, rho: Some(0.8), normalize_protected: true }
            .init(3, 5)
            .unwrap();
        let inputs = vec![
            ("z".to_string(), random(5, 3, &mut rng)),
            ("w_q".to_string(), params.w_q.clone()),
            ("w_k".to_string(), params.w_k.clone()),
            ("u".to_string(), random(5, 5, &mut rng).map(|v| v.exp())),
        ];
        let report = check_gradients(
            &inputs,
            |t, v| {
                let zn = t.l2_normalize_rows(v[0])?;
                let p = attention_scores_var(t, zn, v[1], v[2], 0.8)?;
                let o = fare_var(t, v[3], p)?;
                let l = t.log(o);
                Ok::<_, Error>(t.sum(l))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn tape_matches_plain_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = random(6, 3, &mut rng);
        let params = AttentionConfig::default().init(3, 9).unwrap();
        let mut t = Tape::new();
        let (zv, q, k) = (t.leaf(z.clone()), t.leaf(params.w_q.clone()), t.leaf(params.w_k.clone()));
        let p = attention_scores_var(&mut t, zv, q, k, params.rho).unwrap();
        let plain = attention_scores(&z, &params).unwrap();
        assert!(t.value(p).max_abs_diff(plain.matrix()).unwrap() < 1e-15);
    }
}
