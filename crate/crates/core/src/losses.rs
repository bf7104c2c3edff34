//! Training objectives, stated in the minimization convention.
//!
//! Every objective has the same shape,
//! `−(1/b) Σ_i log(U_ii / (U_ii + n_i))`, and differs only in how the
//! negative term `n_i` is formed:
//!
//! | objective              | `n_i`                                          |
//! |------------------------|------------------------------------------------|
//! | FAREContrast           | attention-weighted row of `U` (dense/sparse)   |
//! | InfoNCE                | `Σ_{j≠i} U_ij`                                 |
//! | clustered Fair-InfoNCE | `Σ_{j≠i, c(j)=c(i)} U_ij`                      |
//! | CCLK                   | `[U (K_Z + λI)⁻¹ K_Z]_ii`                      |
//!
//! Plain functions evaluate a loss from values; the `*_var` functions
//! record the same computation on a [`Tape`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::numerics::{Cholesky, Matrix, NumericsError, Tape, Var};

/// Fixed Lloyd iterations for the clustering baseline.
pub const KMEANS_ITERATIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Farecontrast,
    SparseFarecontrast,
    Infonce,
    FairInfonceCluster,
    Cclk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_true")]
    pub include_self: bool,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    #[serde(default)]
    pub kernel: KernelSpec,
}

fn default_true() -> bool {
    true
}
fn default_lambda() -> f64 {
    1e-3
}
fn default_clusters() -> usize {
    10
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            include_self: true,
            lambda: default_lambda(),
            clusters: default_clusters(),
            kernel: KernelSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.clusters == 0 {
            return Err(Error::Config("clusters must be at least 1".into()));
        }
        self.kernel.validate()
    }

    pub fn needs_negatives(&self) -> bool {
        matches!(self.kind, LossKind::Infonce | LossKind::FairInfonceCluster)
    }

    pub fn uses_attention(&self) -> bool {
        matches!(self.kind, LossKind::Farecontrast | LossKind::SparseFarecontrast)
    }
}

fn check_len(u: &SimilarityMatrix, n: usize, op: &'static str) -> Result<()> {
    if n != u.batch_size() {
        return Err(NumericsError::ShapeMismatch {
            op,
            left: u.matrix().shape(),
            right: (n, 1),
        }
        .into());
    }
    Ok(())
}

/// `−(1/b) Σ_i log(U_ii / (U_ii + o_i))` for a FARE output `o`.
pub fn farecontrast_loss(u: &SimilarityMatrix, o: &[f64]) -> Result<f64> {
    check_len(u, o.len(), "farecontrast_loss")?;
    let b = o.len() as f64;
    let total: f64 = u
        .positives()
        .iter()
        .zip(o)
        .map(|(&d, &oi)| positive_term(d, oi))
        .sum();
    Ok(total / b)
}

/// `log(d + n) − log d`, kept accurate when `n ≪ d`.
fn positive_term(d: f64, n: f64) -> f64 {
    (n / d).ln_1p()
}

pub fn infonce_loss(u: &SimilarityMatrix) -> Result<f64> {
    let b = u.batch_size();
    if b < 2 {
        return Err(Error::Invalid("InfoNCE needs at least two samples for negatives".into()));
    }
    let m = u.matrix();
    let total: f64 = (0..b)
        .map(|i| {
            let d = m.get(i, i);
            let neg: f64 = (0..b).filter(|&j| j != i).map(|j| m.get(i, j)).sum();
            positive_term(d, neg)
        })
        .sum();
    Ok(total / b as f64)
}

/// k-means with seeded farthest-point initialization; ties go to the
/// lowest index.
pub fn kmeans(z: &Matrix, k: usize, iterations: usize, seed: u64) -> Vec<usize> {
    let b = z.rows();
    if b == 0 || k == 0 {
        return vec![0; b];
    }
    let k = k.min(b);
    let dist = |a: &[f64], c: &[f64]| -> f64 { a.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![z.row(rng.random_range(0..b)).to_vec()];
    let mut nearest: Vec<f64> = (0..b).map(|i| dist(z.row(i), &centers[0])).collect();
    while centers.len() < k {
        let far = (0..b).fold(0, |best, i| if nearest[i] > nearest[best] { i } else { best });
        centers.push(z.row(far).to_vec());
        let c = centers.last().expect("pushed");
        for (i, n) in nearest.iter_mut().enumerate() {
            *n = n.min(dist(z.row(i), c));
        }
    }
    let mut assign = vec![0; b];
    for _ in 0..iterations {
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = dist(z.row(i), center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            *a = best.0;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..b).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|&i| z.get(i, d)).sum::<f64>() / members.len() as f64;
            }
        }
    }
    assign
}

/// Negatives restricted to same-cluster samples.
#[derive(Debug, Clone)]
pub struct ClusterNegatives {
    pub assignments: Vec<usize>,
    /// `mask[i][j] = 1` when `j ≠ i` shares `i`'s cluster.
    pub mask: Matrix,
    /// Per-anchor weight: `1/contributing` or 0 for singleton anchors.
    pub weights: Vec<f64>,
    pub skipped: usize,
}

impl ClusterNegatives {
    pub fn from_assignments(assignments: Vec<usize>) -> Result<Self> {
        let b = assignments.len();
        let mut mask = Matrix::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                if i != j && assignments[i] == assignments[j] {
                    mask.set(i, j, 1.0);
                }
            }
        }
        let has_neg: Vec<bool> = mask.row_sums().iter().map(|&s| s > 0.0).collect();
        let contributing = has_neg.iter().filter(|&&h| h).count();
        if contributing == 0 {
            return Err(Error::NoNegatives { batch: b });
        }
        let w = 1.0 / contributing as f64;
        Ok(Self {
            weights: has_neg.iter().map(|&h| if h { w } else { 0.0 }).collect(),
            skipped: b - contributing,
            assignments,
            mask,
        })
    }

    pub fn compute(z: &Matrix, clusters: usize, seed: u64) -> Result<Self> {
        if z.rows() < 2 {
            return Err(Error::Invalid("clustered Fair-InfoNCE needs at least two samples".into()));
        }
        Self::from_assignments(kmeans(z, clusters, KMEANS_ITERATIONS, seed))
    }
}

#[derive(Debug, Clone)]
pub struct ClusterLoss {
    pub loss: f64,
    pub skipped: usize,
    pub assignments: Vec<usize>,
}

pub fn fair_infonce_cluster_loss(
    u: &SimilarityMatrix,
    z: &Matrix,
    clusters: usize,
    seed: u64,
) -> Result<ClusterLoss> {
    check_len(u, z.rows(), "fair_infonce_cluster_loss")?;
    let neg = ClusterNegatives::compute(z, clusters, seed)?;
    let m = u.matrix();
    let b = m.rows();
    let mut total = 0.0;
    for i in 0..b {
        if neg.weights[i] == 0.0 {
            continue;
        }
        let d = m.get(i, i);
        let n: f64 = (0..b).map(|j| m.get(i, j) * neg.mask.get(i, j)).sum();
        total += neg.weights[i] * positive_term(d, n);
    }
    Ok(ClusterLoss {
        loss: total,
        skipped: neg.skipped,
        assignments: neg.assignments,
    })
}

/// Smoothed kernel weights `(K_Z + λI)⁻¹ K_Z` via a Cholesky solve.
pub fn cclk_weights(k_z: &Matrix, lambda: f64) -> Result<Matrix> {
    if k_z.rows() != k_z.cols() {
        return Err(NumericsError::ShapeMismatch {
            op: "cclk_weights",
            left: k_z.shape(),
            right: (k_z.rows(), k_z.rows()),
        }
        .into());
    }
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    let mut reg = k_z.clone();
    for i in 0..reg.rows() {
        reg.set(i, i, reg.get(i, i) + lambda);
    }
    let chol = Cholesky::factor(&reg).map_err(|source| Error::Conditioning { lambda, source })?;
    Ok(chol.solve(k_z)?)
}

/// `o_i = Σ_j U_ij X_ji` with `X = (K_Z + λI)⁻¹ K_Z`.
pub fn cclk_score(u: &SimilarityMatrix, k_z: &Matrix, lambda: f64) -> Result<Vec<f64>> {
    check_len(u, k_z.rows(), "cclk_score")?;
    let x = cclk_weights(k_z, lambda)?;
    let m = u.matrix();
    Ok((0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m.get(i, j) * x.get(j, i)).sum())
        .collect())
}

pub fn cclk_loss(u: &SimilarityMatrix, k_z: &Matrix, lambda: f64) -> Result<f64> {
    let o = cclk_score(u, k_z, lambda)?;
    check_positive_denominators(&u.positives(), &o)?;
    farecontrast_loss(u, &o)
}

fn check_positive_denominators(pos: &[f64], neg: &[f64]) -> Result<()> {
    if let Some(i) = pos.iter().zip(neg).position(|(d, n)| !(d + n > 0.0)) {
        return Err(Error::Invalid(format!(
            "anchor {i}: positive plus conditioned negative score is not positive ({} + {})",
            pos[i], neg[i]
        )));
    }
    Ok(())
}

/// `mean_i(log(U_ii + n_i) − log U_ii)` for an `b×1` negative column.
pub fn contrastive_var(tape: &mut Tape, u: Var, negatives: Var) -> Result<Var> {
    let d = tape.diag(u)?;
    let den = tape.add(d, negatives)?;
    let log_den = tape.log(den);
    let log_d = tape.log(d);
    let terms = tape.sub(log_den, log_d)?;
    Ok(tape.mean(terms))
}

pub fn farecontrast_var(tape: &mut Tape, u: Var, p: Var) -> Result<Var> {
    let o = crate::fare::fare_var(tape, u, p)?;
    contrastive_var(tape, u, o)
}

pub fn infonce_var(tape: &mut Tape, u: Var) -> Result<Var> {
    let b = tape.value(u).rows();
    if b < 2 {
        return Err(Error::Invalid("InfoNCE needs at least two samples for negatives".into()));
    }
    let mut off = Matrix::filled(b, b, 1.0);
    for i in 0..b {
        off.set(i, i, 0.0);
    }
    let mask = tape.leaf(off);
    let masked = tape.mul(u, mask)?;
    let neg = tape.row_sum(masked);
    contrastive_var(tape, u, neg)
}

pub fn fair_infonce_cluster_var(tape: &mut Tape, u: Var, negatives: &ClusterNegatives) -> Result<Var> {
    let mask = tape.leaf(negatives.mask.clone());
    let masked = tape.mul(u, mask)?;
    let neg = tape.row_sum(masked);
    let d = tape.diag(u)?;
    let den = tape.add(d, neg)?;
    let log_den = tape.log(den);
    let log_d = tape.log(d);
    let terms = tape.sub(log_den, log_d)?;
    let w = tape.leaf(Matrix::column(&negatives.weights));
    let weighted = tape.mul(terms, w)?;
    Ok(tape.sum(weighted))
}

/// CCLK objective; the kernel weights are constants of the protected
/// attributes, so gradients flow only through `U`.
pub fn cclk_var(tape: &mut Tape, u: Var, weights: &Matrix) -> Result<Var> {
    let wt = tape.leaf(weights.transpose());
    let weighted = tape.mul(u, wt)?;
    let o = tape.row_sum(weighted);
    let pos = tape.value(u).diagonal();
    check_positive_denominators(&pos, tape.value(o).as_slice())?;
    contrastive_var(tape, u, o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fare::{attention_scores, fare, AttentionConfig};
    use crate::kernels::{kernel_matrix, KernelKind};
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_u(b: usize, rng: &mut ChaCha8Rng) -> SimilarityMatrix {
        SimilarityMatrix::new(random(b, b, rng).map(|c| (c / 0.5).exp())).unwrap()
    }

    fn tape_value(u: &SimilarityMatrix, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
        let mut t = Tape::new();
        let uv = t.leaf(u.matrix().clone());
        let l = f(&mut t, uv).unwrap();
        t.scalar_value(l).unwrap()
    }

    #[test]
    fn farecontrast_examples() {
        let u = SimilarityMatrix::new(Matrix::scalar(3.7)).unwrap();
        assert!((farecontrast_loss(&u, &[3.7]).unwrap() - 2f64.ln()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = SimilarityMatrix::new(Matrix::filled(5, 5, 1.9)).unwrap();
        let z = random(5, 3, &mut rng);
        let p = attention_scores(&z, &AttentionConfig::default().init(3, 0).unwrap()).unwrap();
        let o = fare(&u, &p).unwrap();
        assert!((farecontrast_loss(&u, &o).unwrap() - 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn farecontrast_term_by_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_u(4, &mut rng);
        let o: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..5.0)).collect();
        let mut expect = 0.0;
        for i in 0..4 {
            let d = u.matrix().get(i, i);
            expect -= (d / (d + o[i])).ln() / 4.0;
        }
        let got = farecontrast_loss(&u, &o).unwrap();
        assert!((got - expect).abs() < 1e-14);
        assert!(got > 0.0);
        assert!(farecontrast_loss(&u, &o[..3]).is_err());
    }

    #[test]
    fn infonce_examples() {
        let u = SimilarityMatrix::new(Matrix::filled(2, 2, 0.8)).unwrap();
        assert!((infonce_loss(&u).unwrap() - 2f64.ln()).abs() < 1e-15);

        let tau: f64 = 0.1;
        let mut m = Matrix::filled(2, 2, (-1.0 / tau).exp());
        m.set(0, 0, (1.0 / tau).exp());
        m.set(1, 1, (1.0 / tau).exp());
        let l = infonce_loss(&SimilarityMatrix::new(m).unwrap()).unwrap();
        assert!((l - 2.061_153_620_314_381e-9).abs() < 1e-18);

        assert!(infonce_loss(&SimilarityMatrix::new(Matrix::scalar(1.0)).unwrap()).is_err());
    }

    #[test]
    fn infonce_direct_and_tape_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_u(4, &mut rng);
        let m = u.matrix();
        let mut expect = 0.0;
        for i in 0..4 {
            let d = m.get(i, i);
            let n: f64 = (0..4).filter(|&j| j != i).map(|j| m.get(i, j)).sum();
            expect += (1.0 + n / d).ln() / 4.0;
        }
        assert!((infonce_loss(&u).unwrap() - expect).abs() < 1e-14);
        assert!((tape_value(&u, infonce_var) - expect).abs() < 1e-14);
    }

    #[test]
    fn single_cluster_equals_infonce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_u(6, &mut rng);
        let z = random(6, 3, &mut rng);
        let c = fair_infonce_cluster_loss(&u, &z, 1, 9).unwrap();
        assert!((c.loss - infonce_loss(&u).unwrap()).abs() < 1e-12);
        assert_eq!(c.skipped, 0);
    }

    #[test]
    fn separated_clusters_never_share_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        for i in 0..10 {
            let base = if i % 2 == 0 { 0.0 } else { 10.0 };
            rows.push([base + rng.random_range(0.0..0.1), base + rng.random_range(0.0..0.1)]);
        }
        let z = Matrix::from_rows(&rows).unwrap();
        let neg = ClusterNegatives::compute(&z, 2, 3).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                if neg.mask.get(i, j) > 0.0 {
                    assert_eq!(i % 2, j % 2);
                }
            }
        }
        assert_eq!(neg.skipped, 0);
    }

    #[test]
    fn cluster_loss_matches_restricted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = random_u(8, &mut rng);
        let z = random(8, 3, &mut rng);
        let c = fair_infonce_cluster_loss(&u, &z, 2, 1).unwrap();
        let (m, a) = (u.matrix(), &c.assignments);
        let mut terms = Vec::new();
        for i in 0..8 {
            let negs: Vec<usize> = (0..8).filter(|&j| j != i && a[j] == a[i]).collect();
            if negs.is_empty() {
                continue;
            }
            let d = m.get(i, i);
            let n: f64 = negs.iter().map(|&j| m.get(i, j)).sum();
            terms.push(-(d / (d + n)).ln());
        }
        assert_eq!(c.skipped, 8 - terms.len());
        let expect = terms.iter().sum::<f64>() / terms.len() as f64;
        assert!((c.loss - expect).abs() < 1e-14);

        let neg = ClusterNegatives::compute(&z, 2, 1).unwrap();
        let tv = tape_value(&u, |t, uv| fair_infonce_cluster_var(t, uv, &neg));
        assert!((tv - expect).abs() < 1e-14);
    }

    #[test]
    fn all_singletons_rejected() {
        let neg = ClusterNegatives::from_assignments(vec![0, 1, 2]);
        assert!(matches!(neg, Err(Error::NoNegatives { batch: 3 })));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = random_u(4, &mut rng);
        let z = random(4, 2, &mut rng);
        assert!(fair_infonce_cluster_loss(&u, &z, 4, 0).is_err());
    }

    #[test]
    fn cclk_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random_u(5, &mut rng);
        let i5 = Matrix::identity(5);
        assert_eq!(cclk_score(&u, &i5, 0.0).unwrap(), u.positives());
        let half = cclk_score(&u, &i5, 1.0).unwrap();
        for (h, d) in half.iter().zip(u.positives()) {
            assert!((h - d / 2.0).abs() < 1e-12);
        }
        let c = SimilarityMatrix::new(Matrix::filled(3, 3, 2.5)).unwrap();
        assert!((cclk_loss(&c, &Matrix::identity(3), 0.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        let one = SimilarityMatrix::new(Matrix::scalar(4.2)).unwrap();
        assert!((cclk_loss(&one, &Matrix::scalar(1.0), 1.0).unwrap() - 1.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cclk_score_decomposes_into_smoothed_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random(6, 3, &mut rng);
        let k = kernel_matrix(&z, &KernelSpec::new(KernelKind::Rbf)).unwrap();
        let u = random_u(6, &mut rng);
        let x = cclk_weights(&k, 0.1).unwrap();
        let o = cclk_score(&u, &k, 0.1).unwrap();
        let prod = u.matrix().matmul(&x).unwrap();
        for i in 0..6 {
            assert!((o[i] - prod.get(i, i)).abs() < 1e-12);
        }
        let tv = tape_value(&u, |t, uv| cclk_var(t, uv, &x));
        assert!((tv - cclk_loss(&u, &k, 0.1).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn cclk_singular_kernel_reports_conditioning() {
        let k = Matrix::filled(3, 3, 1.0);
        let u = SimilarityMatrix::new(Matrix::filled(3, 3, 1.0)).unwrap();
        assert!(matches!(cclk_score(&u, &k, 0.0), Err(Error::Conditioning { .. })));
        assert!(cclk_score(&u, &k, 1e-3).is_ok());
    }

    #[test]
    fn fare_tape_loss_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = random_u(7, &mut rng);
        let z = random(7, 3, &mut rng);
        let p = attention_scores(&z, &AttentionConfig::default().init(3, 5).unwrap()).unwrap();
        let plain = farecontrast_loss(&u, &fare(&u, &p).unwrap()).unwrap();
        let tv = tape_value(&u, |t, uv| {
            let pv = t.leaf(p.matrix().clone());
            farecontrast_var(t, uv, pv)
        });
        assert!((tv - plain).abs() < 1e-14);
    }

    #[test]
    fn kmeans_is_seeded_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random(30, 3, &mut rng);
        assert_eq!(kmeans(&z, 4, 20, 2), kmeans(&z, 4, 20, 2));
        let a = kmeans(&z, 4, 20, 2);
        assert!(a.iter().all(|&c| c < 4));
    }
}
