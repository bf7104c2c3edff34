//! LSH-restricted attention supports and SparseFARE.
//!
//! Each hashing round draws a Gaussian projection `R`, buckets every
//! protected row by `argmax(concat(zR, −zR))`, stably sorts the batch by
//! bucket and cuts the sorted order into fixed-size chunks. A query may
//! attend to its own chunk and, with [`Adjacency::Adjacent`], the chunks
//! directly before and after it (no wraparound). Supports from all
//! rounds are unioned.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::fare::{attention_logits_var, AttentionMap, AttentionParams};
use crate::numerics::{dot, softmax_in_place, Matrix, NumericsError, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjacency {
    None,
    Adjacent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LshConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_buckets")]
    pub n_buckets: usize,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    #[serde(default = "default_adjacency")]
    pub adjacency: Adjacency,
    #[serde(default)]
    pub seed: u64,
}

fn default_rounds() -> usize {
    8
}
fn default_buckets() -> usize {
    8
}
fn default_chunk() -> usize {
    16
}
fn default_adjacency() -> Adjacency {
    Adjacency::Adjacent
}

impl Default for LshConfig {
    fn default() -> Self {
        Self {
            rounds: default_rounds(),
            n_buckets: default_buckets(),
            chunk_size: default_chunk(),
            adjacency: default_adjacency(),
            seed: 0,
        }
    }
}

impl LshConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_buckets < 2 || !self.n_buckets.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "n_buckets must be even and at least 2, got {}",
                self.n_buckets
            )));
        }
        if self.rounds == 0 || self.chunk_size == 0 {
            return Err(Error::Config("rounds and chunk_size must be positive".into()));
        }
        Ok(())
    }
}

/// Random projection for one hashing round, `d_z × n_buckets/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LshRound {
    pub r: Matrix,
}

impl LshRound {
    pub fn new(r: Matrix) -> Self {
        Self { r }
    }

    pub fn draw(d_z: usize, n_buckets: usize, rng: &mut ChaCha8Rng) -> Self {
        let half = n_buckets / 2;
        let data = (0..d_z * half).map(|_| StandardNormal.sample(rng)).collect();
        Self {
            r: Matrix::new(d_z, half, data).expect("sized"),
        }
    }

    pub fn n_buckets(&self) -> usize {
        2 * self.r.cols()
    }
}

/// Bucket of `z` under projection `r`: argmax of `concat(zR, −zR)`, ties
/// resolved toward the lowest index.
pub fn hash(z: &[f64], r: &Matrix) -> usize {
    let half = r.cols();
    let mut best = (0, f64::NEG_INFINITY);
    let mut proj = vec![0.0; half];
    for (k, &zk) in z.iter().enumerate() {
        for (p, &rv) in proj.iter_mut().zip(r.row(k)) {
            *p += zk * rv;
        }
    }
    for (idx, v) in proj.iter().copied().chain(proj.iter().map(|p| -p)).enumerate() {
        if v > best.1 {
            best = (idx, v);
        }
    }
    best.0
}

/// Per-query attention support; `i ∈ S_i`, members sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    sets: Vec<Vec<usize>>,
}

impl SupportSet {
    pub fn new(mut sets: Vec<Vec<usize>>) -> Result<Self> {
        let b = sets.len();
        for (i, s) in sets.iter_mut().enumerate() {
            s.sort_unstable();
            s.dedup();
            if let Some(&bad) = s.iter().find(|&&j| j >= b) {
                return Err(NumericsError::BadSupport { index: bad, batch: b }.into());
            }
            if s.binary_search(&i).is_err() {
                return Err(Error::Invalid(format!("support of {i} does not contain {i}")));
            }
        }
        Ok(Self { sets })
    }

    pub fn full(b: usize) -> Self {
        Self {
            sets: (0..b).map(|_| (0..b).collect()).collect(),
        }
    }

    pub fn self_only(b: usize) -> Self {
        Self {
            sets: (0..b).map(|i| vec![i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn as_slices(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.sets[i].binary_search(&j).is_ok()
    }

    pub fn is_superset_of(&self, other: &SupportSet) -> bool {
        self.len() == other.len()
            && other
                .sets
                .iter()
                .enumerate()
                .all(|(i, s)| s.iter().all(|&j| self.contains(i, j)))
    }

    /// One line per query: `i: j1 j2 …`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sets.iter().enumerate() {
            let _ = write!(out, "{i}:");
            for j in s {
                let _ = write!(out, " {j}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the [`dump`](Self::dump) format. Lines must appear in index order.
    pub fn parse_dump(text: &str) -> Result<Self> {
        let mut sets = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let invalid = |msg: String| Error::Parse {
                path: "<support dump>".into(),
                line: n as u64 + 1,
                message: msg,
            };
            let (head, rest) = line
                .split_once(':')
                .ok_or_else(|| invalid("missing ':'".into()))?;
            let idx: usize = head
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad index {head:?}")))?;
            if idx != n {
                return Err(invalid(format!("expected index {n}, found {idx}")));
            }
            let members = rest
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| invalid(format!("bad member {t:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if members.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid("members must be strictly ascending".into()));
            }
            sets.push(members);
        }
        Self::new(sets)
    }
}

/// Draws `cfg.rounds` projections from a stream seeded with `cfg.seed`.
pub fn draw_rounds(d_z: usize, cfg: &LshConfig) -> Result<Vec<LshRound>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.rounds).map(|_| LshRound::draw(d_z, cfg.n_buckets, &mut rng)).collect())
}

pub fn build_supports(z: &Matrix, cfg: &LshConfig) -> Result<SupportSet> {
    let rounds = draw_rounds(z.cols(), cfg)?;
    build_supports_with(z, &rounds, cfg)
}

/// Support construction for explicit projections; `cfg.rounds` and
/// `cfg.seed` are ignored.
pub fn build_supports_with(z: &Matrix, rounds: &[LshRound], cfg: &LshConfig) -> Result<SupportSet> {
    if cfg.chunk_size == 0 {
        return Err(Error::Config("chunk_size must be positive".into()));
    }
    let b = z.rows();
    let mut member = vec![vec![false; b]; b];
    for round in rounds {
        if round.r.rows() != z.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "lsh_hash",
                left: z.shape(),
                right: round.r.shape(),
            }
            .into());
        }
        let buckets: Vec<usize> = (0..b).map(|i| hash(z.row(i), &round.r)).collect();
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by_key(|&i| (buckets[i], i));
        let chunks: Vec<&[usize]> = order.chunks(cfg.chunk_size).collect();
        for (c, chunk) in chunks.iter().enumerate() {
            let (lo, hi) = match cfg.adjacency {
                Adjacency::None => (c, c),
                Adjacency::Adjacent => (c.saturating_sub(1), (c + 1).min(chunks.len() - 1)),
            };
            for &i in chunk.iter() {
                for neighbour in &chunks[lo..=hi] {
                    for &j in neighbour.iter() {
                        member[i][j] = true;
                    }
                }
            }
        }
    }
    for (i, row) in member.iter_mut().enumerate() {
        row[i] = true;
    }
    let sets = member
        .into_iter()
        .map(|row| row.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j).collect())
        .collect();
    Ok(SupportSet { sets })
}

/// Attention restricted to `supports`; off-support entries are exactly 0.
/// Logits are evaluated only on support entries.
pub fn sparse_attention_scores(
    z: &Matrix,
    params: &AttentionParams,
    supports: &SupportSet,
) -> Result<AttentionMap> {
    params.validate()?;
    let b = z.rows();
    if supports.len() != b {
        return Err(Error::Invalid(format!(
            "support set covers {} queries, batch has {b}",
            supports.len()
        )));
    }
    let q = z.matmul(&params.w_q)?;
    let k = z.matmul(&params.w_k)?;
    let mut p = Matrix::zeros(b, b);
    let mut buf = Vec::new();
    for i in 0..b {
        let s = supports.get(i);
        buf.clear();
        buf.extend(s.iter().map(|&j| dot(q.row(i), k.row(j)) / params.rho));
        softmax_in_place(&mut buf);
        for (&j, &v) in s.iter().zip(&buf) {
            p.set(i, j, v);
        }
    }
    Ok(AttentionMap(p))
}

pub fn sparse_attention_scores_var(
    tape: &mut Tape,
    z: Var,
    w_q: Var,
    w_k: Var,
    rho: f64,
    supports: &SupportSet,
) -> Result<Var> {
    let logits = attention_logits_var(tape, z, w_q, w_k, rho)?;
    Ok(tape.masked_softmax_rows(logits, supports.as_slices())?)
}

/// `o_i = Σ_{j ∈ S_i} P_ij U_ij`.
pub fn sparse_fare(u: &SimilarityMatrix, p: &AttentionMap, supports: &SupportSet) -> Result<Vec<f64>> {
    let (um, pm) = (u.matrix(), p.matrix());
    if um.shape() != pm.shape() || supports.len() != um.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "sparse_fare",
            left: um.shape(),
            right: pm.shape(),
        }
        .into());
    }
    Ok((0..um.rows())
        .map(|i| supports.get(i).iter().map(|&j| pm.get(i, j) * um.get(i, j)).sum())
        .collect())
}
