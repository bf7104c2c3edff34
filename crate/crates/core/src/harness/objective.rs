//! Per-batch conditioning and the differentiable training objective.

use super::config::TrainConfig;
use super::mix_seed;
use crate::encoder::{encode_var, similarity_var, EncoderParams, ScoringConfig};
use crate::error::{Error, Result};
use crate::fare::{attention_logits_var, fare_var, prepare_protected, AttentionParams};
use crate::kernels::kernel_matrix;
use crate::losses::{
    cclk_var, cclk_weights, contrastive_var, fair_infonce_cluster_var, infonce_var, ClusterNegatives,
    LossKind,
};
use crate::numerics::{Matrix, Tape, Var};
use crate::sparse::build_supports;

/// Everything about a batch's negatives that does not depend on the
/// trainable parameters.
#[derive(Debug, Clone)]
pub enum Conditioning {
    /// Attention over prepared protected rows. `supports` restricts each
    /// query; `None` means the full batch.
    Attention {
        z: Matrix,
        supports: Option<Vec<Vec<usize>>>,
    },
    Infonce,
    Cluster(ClusterNegatives),
    /// Smoothed kernel weights `X`.
    Cclk(Matrix),
}

impl Conditioning {
    pub fn prepare(cfg: &TrainConfig, z: &Matrix, step_seed: u64) -> Result<Self> {
        let loss = &cfg.loss;
        let drop_self = |mut sets: Vec<Vec<usize>>| {
            for (i, s) in sets.iter_mut().enumerate() {
                s.retain(|&j| j != i);
            }
            sets
        };
        Ok(match loss.kind {
            LossKind::Farecontrast => {
                let b = z.rows();
                Conditioning::Attention {
                    z: prepare_protected(z, cfg.attention.normalize_protected)?,
                    supports: (!loss.include_self).then(|| drop_self(vec![(0..b).collect(); b])),
                }
            }
            LossKind::SparseFarecontrast => {
                let zp = prepare_protected(z, cfg.attention.normalize_protected)?;
                let mut lsh = cfg.lsh();
                lsh.seed = mix_seed(lsh.seed, step_seed);
                let sets = build_supports(&zp, &lsh)?.as_slices().to_vec();
                Conditioning::Attention {
                    z: zp,
                    supports: Some(if loss.include_self { sets } else { drop_self(sets) }),
                }
            }
            LossKind::Infonce => Conditioning::Infonce,
            LossKind::FairInfonceCluster => {
                Conditioning::Cluster(ClusterNegatives::compute(z, loss.clusters, step_seed)?)
            }
            LossKind::Cclk => Conditioning::Cclk(cclk_weights(&kernel_matrix(z, &loss.kernel)?, loss.lambda)?),
        })
    }

    pub fn loss_var(&self, tape: &mut Tape, u: Var, attention: Option<(Var, Var, f64)>) -> Result<Var> {
        match self {
            Conditioning::Attention { z, supports } => {
                let (w_q, w_k, rho) =
                    attention.ok_or_else(|| Error::Invalid("attention objective without W_Q/W_K".into()))?;
                let z = tape.leaf(z.clone());
                let logits = attention_logits_var(tape, z, w_q, w_k, rho)?;
                let p = match supports {
                    None => tape.softmax_rows(logits),
                    Some(s) => tape.masked_softmax_rows(logits, s)?,
                };
                let o = fare_var(tape, u, p)?;
                contrastive_var(tape, u, o)
            }
            Conditioning::Infonce => infonce_var(tape, u),
            Conditioning::Cluster(neg) => fair_infonce_cluster_var(tape, u, neg),
            Conditioning::Cclk(x) => cclk_var(tape, u, x),
        }
    }
}

/// Parameters updated by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub encoder: EncoderParams,
    pub attention: Option<AttentionParams>,
}

impl Trainable {
    pub fn names(&self) -> Vec<String> {
        let mut names = self.encoder.matrix_names();
        if self.attention.is_some() {
            names.push("attention.w_q".into());
            names.push("attention.w_k".into());
        }
        names
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut m = self.encoder.matrices();
        if let Some(a) = &self.attention {
            m.push(&a.w_q);
            m.push(&a.w_k);
        }
        m
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut m = self.encoder.matrices_mut();
        if let Some(a) = &mut self.attention {
            m.push(&mut a.w_q);
            m.push(&mut a.w_k);
        }
        m
    }

    pub fn named(&self) -> Vec<(String, Matrix)> {
        self.names().into_iter().zip(self.matrices().into_iter().cloned()).collect()
    }

    /// Objective over one batch. `leaves` hold the parameters in
    /// [`Trainable::names`] order.
    pub fn graph(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        x: &Matrix,
        y: &Matrix,
        scoring: &ScoringConfig,
        cond: &Conditioning,
    ) -> Result<Var> {
        let n_enc = 2 * self.encoder.layers().len();
        let layers: Vec<(Var, Var)> = leaves[..n_enc].chunks(2).map(|c| (c[0], c[1])).collect();
        let attention = self
            .attention
            .as_ref()
            .map(|a| (leaves[n_enc], leaves[n_enc + 1], a.rho));
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let ex = encode_var(tape, xv, &layers)?;
        let ey = encode_var(tape, yv, &layers)?;
        let u = similarity_var(tape, ex, ey, scoring)?;
        cond.loss_var(tape, u, attention)
    }

    /// Loss value and gradients in [`Trainable::names`] order.
    pub fn loss_and_gradients(
        &self,
        x: &Matrix,
        y: &Matrix,
        scoring: &ScoringConfig,
        cond: &Conditioning,
    ) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = self.matrices().into_iter().map(|m| tape.leaf(m.clone())).collect();
        let root = self.graph(&mut tape, &leaves, x, y, scoring, cond)?;
        let loss = tape.scalar_value(root)?;
        if !loss.is_finite() {
            return Ok((loss, Vec::new()));
        }
        let grads = tape.backward(root)?;
        Ok((loss, leaves.iter().map(|&v| grads.get(v)).collect()))
    }

    pub fn norms(&self) -> String {
        self.names()
            .iter()
            .zip(self.matrices())
            .map(|(n, m)| format!("{n}={:.3e}", m.frobenius_norm()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}
