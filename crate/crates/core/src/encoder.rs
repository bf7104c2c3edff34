//! Shared MLP encoder and the exponentiated cosine scoring function.
//!
//! Both views of a sample go through the same encoder. The similarity
//! matrix holds `U[i][j] = exp(cos(g(x_i), g(y_j)) / tau)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, Matrix, NumericsError, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weight: Matrix,
    /// `1 × fan_out`.
    pub bias: Matrix,
}

/// Weights of a rectifier MLP. Hidden layers use ReLU, the last layer is
/// linear. With no layers the encoder is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEncoder", into = "RawEncoder")]
pub struct EncoderParams {
    input_dim: usize,
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEncoder {
    input_dim: usize,
    layers: Vec<Layer>,
}

impl TryFrom<RawEncoder> for EncoderParams {
    type Error = Error;
    fn try_from(raw: RawEncoder) -> Result<Self> {
        EncoderParams::new(raw.input_dim, raw.layers)
    }
}

impl From<EncoderParams> for RawEncoder {
    fn from(p: EncoderParams) -> Self {
        RawEncoder {
            input_dim: p.input_dim,
            layers: p.layers,
        }
    }
}

impl EncoderParams {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut width = input_dim;
        for (k, layer) in layers.iter().enumerate() {
            if layer.weight.rows() != width
                || layer.bias.shape() != (1, layer.weight.cols())
                || layer.weight.cols() == 0
            {
                return Err(Error::Invalid(format!(
                    "layer {k}: weight {}×{} / bias {}×{} do not conform to input width {width}",
                    layer.weight.rows(),
                    layer.weight.cols(),
                    layer.bias.rows(),
                    layer.bias.cols()
                )));
            }
            width = layer.weight.cols();
        }
        Ok(Self { input_dim, layers })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            input_dim: dim,
            layers: Vec::new(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.weight.cols())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Parameter matrices in a fixed order: `w0, b0, w1, b1, …`.
    pub fn matrices(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn matrix_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|k| [format!("encoder.layer{k}.weight"), format!("encoder.layer{k}.bias")])
            .collect()
    }

    /// Records every parameter as a tape leaf, returning `(weight, bias)` pairs.
    pub fn record(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect()
    }
}

/// Layer widths: input, hidden…, embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderArch {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_embed_dim() -> usize {
    16
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            embed_dim: default_embed_dim(),
        }
    }
}

impl EncoderArch {
    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(input_dim);
        w.extend(&self.hidden);
        w.push(self.embed_dim);
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub tau: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { tau: 0.5 }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// `b×b` matrix of exponentiated scores; every entry strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    pub fn new(u: Matrix) -> Result<Self> {
        if u.rows() != u.cols() {
            return Err(Error::Invalid(format!(
                "similarity matrix must be square, got {}×{}",
                u.rows(),
                u.cols()
            )));
        }
        if u.as_slice().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Invalid(
                "similarity matrix entries must be finite and positive".into(),
            ));
        }
        Ok(Self(u))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.rows()
    }

    pub fn positives(&self) -> Vec<f64> {
        self.0.diagonal()
    }
}

/// Weights with standard deviation `1/sqrt(fan_in)`, zero biases.
pub fn init_params(widths: &[usize], seed: u64) -> Result<EncoderParams> {
    let Some(&input_dim) = widths.first() else {
        return Err(Error::Config("encoder needs at least an input width".into()));
    };
    if widths.contains(&0) {
        return Err(Error::Config(format!("layer widths must be positive: {widths:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let sd = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| { let v: f64 = StandardNormal.sample(&mut rng); sd * v })
                .collect();
            Layer {
                weight: Matrix::new(fan_in, fan_out, data).expect("sized"),
                bias: Matrix::zeros(1, fan_out),
            }
        })
        .collect();
    EncoderParams::new(input_dim, layers)
}

pub fn encode(features: &Matrix, params: &EncoderParams) -> Result<Matrix> {
    check_input(features, params)?;
    let mut h = features.clone();
    let last = params.layers.len().saturating_sub(1);
    for (k, layer) in params.layers.iter().enumerate() {
        h = h.matmul(&layer.weight)?;
        for i in 0..h.rows() {
            for (v, b) in h.row_mut(i).iter_mut().zip(layer.bias.as_slice()) {
                *v += b;
                if k < last {
                    *v = v.max(0.0);
                }
            }
        }
    }
    Ok(h)
}

/// Differentiable forward pass; `layers` come from [`EncoderParams::record`].
pub fn encode_var(tape: &mut Tape, features: Var, layers: &[(Var, Var)]) -> Result<Var> {
    let mut h = features;
    for (k, &(w, b)) in layers.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if k + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn check_input(features: &Matrix, params: &EncoderParams) -> Result<()> {
    if features.cols() != params.input_dim {
        return Err(NumericsError::ShapeMismatch {
            op: "encode",
            left: features.shape(),
            right: (params.input_dim, params.embed_dim()),
        }
        .into());
    }
    Ok(())
}

pub fn similarity_matrix(x_emb: &Matrix, y_emb: &Matrix, cfg: &ScoringConfig) -> Result<SimilarityMatrix> {
    cfg.validate()?;
    x_emb.expect_same_shape(y_emb, "similarity_matrix")?;
    let xn = l2_normalize_rows(x_emb)?;
    let yn = l2_normalize_rows(y_emb)?;
    let u = xn.matmul_transposed(&yn)?.map(|c| (c / cfg.tau).exp());
    SimilarityMatrix::new(u)
}

/// Differentiable counterpart of [`similarity_matrix`].
pub fn similarity_var(tape: &mut Tape, x_emb: Var, y_emb: Var, cfg: &ScoringConfig) -> Result<Var> {
    cfg.validate()?;
    tape.value(x_emb).expect_same_shape(tape.value(y_emb), "similarity_matrix")?;
    let xn = tape.l2_normalize_rows(x_emb)?;
    let yn = tape.l2_normalize_rows(y_emb)?;
    let cos = tape.matmul_transposed(xn, yn)?;
    let logits = tape.scale(cos, 1.0 / cfg.tau);
    Ok(tape.exp(logits))
}
