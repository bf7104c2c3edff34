//! Kernels over protected attributes for the CCLK baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Cosine,
    Rbf,
    Linear,
    Polynomial,
    Laplacian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// rbf/laplacian bandwidth; `None` uses the median pairwise distance.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default = "default_degree")]
    pub degree: u32,
    #[serde(default = "default_offset")]
    pub offset: f64,
}

fn default_degree() -> u32 {
    2
}

fn default_offset() -> f64 {
    1.0
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::new(KernelKind::Cosine)
    }
}

impl KernelSpec {
    pub fn new(kind: KernelKind) -> Self {
        Self {
            kind,
            bandwidth: None,
            degree: default_degree(),
            offset: default_offset(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bw) = self.bandwidth {
            if !(bw > 0.0 && bw.is_finite()) {
                return Err(Error::Config(format!("kernel bandwidth must be positive, got {bw}")));
            }
        }
        if self.degree == 0 {
            return Err(Error::Config("polynomial degree must be at least 1".into()));
        }
        Ok(())
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the pairwise Euclidean distances; 1 when all rows coincide.
pub fn median_pairwise_distance(z: &Matrix) -> f64 {
    let mut d = Vec::with_capacity(z.rows() * z.rows().saturating_sub(1) / 2);
    for i in 0..z.rows() {
        for j in (i + 1)..z.rows() {
            d.push(squared_distance(z.row(i), z.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let m = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

pub fn kernel_matrix(z: &Matrix, spec: &KernelSpec) -> Result<Matrix> {
    spec.validate()?;
    let b = z.rows();
    let bandwidth = || spec.bandwidth.unwrap_or_else(|| median_pairwise_distance(z));
    let pairwise = |f: &dyn Fn(&[f64], &[f64]) -> f64, rows: &Matrix| {
        let mut k = Matrix::zeros(b, b);
        for i in 0..b {
            for j in i..b {
                let v = f(rows.row(i), rows.row(j));
                k.set(i, j, v);
                k.set(j, i, v);
            }
        }
        k
    };
    let k = match spec.kind {
        KernelKind::Cosine => {
            let zn = l2_normalize_rows(z).map_err(|e| Error::Invalid(format!("cosine kernel: {e}")))?;
            let mut k = pairwise(&|a, c| dot(a, c), &zn);
            for i in 0..b {
                k.set(i, i, 1.0);
            }
            k
        }
        KernelKind::Linear => pairwise(&|a, c| dot(a, c), z),
        KernelKind::Polynomial => {
            let (offset, degree) = (spec.offset, spec.degree as i32);
            pairwise(&|a, c| (dot(a, c) + offset).powi(degree), z)
        }
        KernelKind::Rbf => {
            let bw = bandwidth();
            pairwise(&|a, c| (-squared_distance(a, c) / (2.0 * bw * bw)).exp(), z)
        }
        KernelKind::Laplacian => {
            let bw = bandwidth();
            pairwise(
                &|a, c| (-a.iter().zip(c).map(|(x, y)| (x - y).abs()).sum::<f64>() / bw).exp(),
                z,
            )
        }
    };
    Ok(k)
}

/// Unnormalized isotropic Gaussian densities `exp(−‖z_i − z_j‖² / 2σ²)`.
/// The density's normalizing constant is omitted; it cancels in every
/// ratio these weights are used in.
pub fn gaussian_weights(z: &Matrix, sigma: f64) -> Result<Matrix> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    let b = z.rows();
    let scale = 1.0 / (2.0 * sigma * sigma);
    let mut w = Matrix::zeros(b, b);
    for i in 0..b {
        w.set(i, i, 1.0);
        for j in (i + 1)..b {
            let v = (-squared_distance(z.row(i), z.row(j)) * scale).exp();
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    Ok(w)
}
