//! Oracle-equivalence and invariant suites behind `verify`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::objective::{Conditioning, Trainable};
use crate::encoder::{encode, init_params, EncoderArch, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::fare::{attention_scores, fare, kde_conditional_score, prepare_protected, AttentionConfig, AttentionParams, KdeConfig};
use crate::losses::{cclk_score, farecontrast_loss, LossConfig, LossKind};
use crate::numerics::{check_gradients, l2_normalize_rows, GradCheckOptions, Matrix, Tape};
use crate::sparse::{build_supports, sparse_attention_scores, sparse_attention_scores_var, sparse_fare, Adjacency, LshConfig, SupportSet};

pub const SUITES: [&str; 7] = [
    "kde-equivalence",
    "sparse-degenerate",
    "gradients",
    "mask-exactness",
    "cclk-oracle",
    "uniform-reduction",
    "value-collapse",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Passed,
    Failed(String),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl SuiteReport {
    pub fn failed(&self) -> bool {
        matches!(self.status, Status::Failed(_))
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.status {
            Status::Passed => write!(f, "PASS {}: {}", self.name, self.detail),
            Status::Failed(why) => write!(f, "FAIL {}: {why}", self.name),
            Status::Skipped(why) => write!(f, "SKIP {}: {why}", self.name),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// When false, protected rows are used as given and the KDE identity
    /// no longer applies.
    pub normalize_protected: bool,
    /// Adds `delta` to one entry of the named parameter's analytic gradient.
    pub perturb_gradient: Option<(String, f64)>,
    pub instances: usize,
    pub gradient_seeds: u64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            normalize_protected: true,
            perturb_gradient: None,
            instances: 100,
            gradient_seeds: 10,
            seed: 0,
        }
    }
}

/// Runs one suite by name, or all of them.
pub fn run(suite: Option<&str>, opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    let names: Vec<&'static str> = match suite {
        None => SUITES.to_vec(),
        Some(s) => vec![*SUITES
            .iter()
            .find(|&&n| n == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}`; known: {}", SUITES.join(", "))))?],
    };
    names
        .into_iter()
        .map(|name| {
            let outcome = match name {
                "kde-equivalence" => kde_equivalence(opts),
                "sparse-degenerate" => sparse_degenerate(opts),
                "gradients" => gradients(opts),
                "mask-exactness" => mask_exactness(opts),
                "cclk-oracle" => cclk_oracle(opts),
                "uniform-reduction" => uniform_reduction(opts),
                _ => value_collapse(),
            };
            Ok(match outcome {
                Ok((status, detail)) => SuiteReport { name, status, detail },
                Err(e) => SuiteReport {
                    name,
                    status: Status::Failed(e.to_string()),
                    detail: String::new(),
                },
            })
        })
        .collect()
}

type Outcome = Result<(Status, String)>;

fn threshold(name: &str, worst: f64, tol: f64) -> (Status, String) {
    let detail = format!("max deviation {worst:.3e} (tolerance {tol:e})");
    if worst <= tol {
        (Status::Passed, detail)
    } else {
        (Status::Failed(format!("{name}: {detail}")), detail)
    }
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Positive similarities shaped like `exp(cos / tau)`.
fn random_u(b: usize, rng: &mut ChaCha8Rng) -> SimilarityMatrix {
    let tau = rng.random_range(0.1..1.0);
    SimilarityMatrix::new(uniform(b, b, -1.0, 1.0, rng).map(|c| (c / tau).exp())).expect("positive")
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn kde_equivalence(opts: &VerifyOptions) -> Outcome {
    if !opts.normalize_protected {
        return Ok((
            Status::Skipped("protected rows are not normalized, so attention is not a Gaussian KDE".into()),
            String::new(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.instances {
        let z = prepare_protected(&uniform(32, 3, -1.0, 1.0, &mut rng), true)?;
        let u = random_u(32, &mut rng);
        let rho = rng.random_range(0.2..2.0);
        let attn = fare(&u, &attention_scores(&z, &AttentionParams::identity(3, rho)?)?)?;
        let kde = kde_conditional_score(&u, &z, &KdeConfig { sigma: f64::sqrt(rho) })?;
        worst = worst.max(max_gap(&attn, &kde));
    }
    Ok(threshold("fare vs kde", worst, 1e-10))
}

fn sparse_degenerate(opts: &VerifyOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 1);
    let mut worst: f64 = 0.0;
    for k in 0..opts.instances {
        let b = rng.random_range(2..40);
        let z = uniform(b, 3, -1.0, 1.0, &mut rng);
        let u = random_u(b, &mut rng);
        let params = AttentionConfig { d_k: 4, ..AttentionConfig::default() }.init(3, k as u64)?;
        let lsh = LshConfig {
            chunk_size: b,
            adjacency: if k % 2 == 0 { Adjacency::None } else { Adjacency::Adjacent },
            seed: k as u64,
            ..LshConfig::default()
        };
        let full = build_supports(&z, &lsh)?;
        if full != SupportSet::full(b) {
            return Ok((Status::Failed(format!("instance {k}: single chunk did not cover the batch")), String::new()));
        }
        let sparse = sparse_fare(&u, &sparse_attention_scores(&z, &params, &full)?, &full)?;
        let dense = fare(&u, &attention_scores(&z, &params)?)?;
        worst = worst.max(max_gap(&sparse, &dense));

        let own = SupportSet::self_only(b);
        let solo = sparse_fare(&u, &sparse_attention_scores(&z, &params, &own)?, &own)?;
        if solo != u.positives() {
            return Ok((Status::Failed(format!("instance {k}: self-only output differs from diag(U)")), String::new()));
        }
    }
    Ok(threshold("single-chunk sparse vs dense", worst, 1e-12))
}

/// Small model used by the gradient suite.
fn gradient_case(kind: LossKind, seed: u64, normalize: bool) -> Result<(TrainConfig, Trainable, Matrix, Matrix, Conditioning)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrainConfig {
        loss: LossConfig { clusters: 3, ..LossConfig::new(kind) },
        sparse: (kind == LossKind::SparseFarecontrast).then(|| LshConfig {
            chunk_size: 3,
            rounds: 2,
            ..LshConfig::default()
        }),
        encoder: EncoderArch { hidden: vec![8], embed_dim: 4 },
        attention: AttentionConfig { d_k: 4, rho: None, normalize_protected: normalize },
        ..TrainConfig::default()
    };
    let (b, d_x, d_z) = (8, 6, 3);
    let encoder = init_params(&cfg.encoder.widths(d_x), seed)?;
    let attention = if cfg.loss.uses_attention() {
        Some(cfg.attention.init(d_z, seed + 1)?)
    } else {
        None
    };
    // Redraw until no row lands on an all-dead hidden layer, whose
    // embedding would be exactly zero.
    let (x, y) = loop {
        let x = uniform(b, d_x, -1.0, 1.0, &mut rng);
        let y = x.zip_map(&uniform(b, d_x, -0.2, 0.2, &mut rng), "jitter", |a, n| a + n)?;
        let live = |m: &Matrix| -> Result<bool> {
            let e = encode(m, &encoder)?;
            Ok((0..b).all(|i| e.row(i).iter().any(|v| v.abs() > 1e-3)))
        };
        if live(&x)? && live(&y)? {
            break (x, y);
        }
    };
    let z = uniform(b, d_z, 0.05, 1.0, &mut rng);
    let cond = Conditioning::prepare(&cfg, &z, seed)?;
    Ok((cfg, Trainable { encoder, attention }, x, y, cond))
}

fn gradients(opts: &VerifyOptions) -> Outcome {
    let kinds = [
        LossKind::Farecontrast,
        LossKind::SparseFarecontrast,
        LossKind::Infonce,
        LossKind::Cclk,
        LossKind::FairInfonceCluster,
    ];
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for kind in kinds {
        for seed in 0..opts.gradient_seeds {
            let (cfg, params, x, y, cond) = gradient_case(kind, opts.seed + seed, opts.normalize_protected)?;
            let named = params.named();
            let mut gc = GradCheckOptions::default();
            if let Some((name, delta)) = &opts.perturb_gradient {
                match named.iter().position(|(n, _)| n == name) {
                    Some(idx) => gc.perturb_analytic = Some((idx, *delta)),
                    None if params.attention.is_none() && name.starts_with("attention.") => {}
                    None => return Err(Error::Config(format!("no parameter named `{name}`"))),
                }
            }
            let report = check_gradients(
                &named,
                |tape: &mut Tape, leaves| params.graph(tape, leaves, &x, &y, &cfg.scoring, &cond),
                &gc,
            )?;
            checked += named.len();
            if let Some(w) = report.worst() {
                worst = worst.max(w.max_rel_error);
            }
            let failing: Vec<String> = report
                .failures()
                .map(|p| format!("{} (relative error {:.3e}, analytic {:.6e}, numeric {:.6e})", p.name, p.max_rel_error, p.analytic, p.numeric))
                .collect();
            if !failing.is_empty() {
                return Ok((
                    Status::Failed(format!("{kind:?} seed {seed}: {}", failing.join("; "))),
                    String::new(),
                ));
            }
        }
    }
    let (status, detail) = threshold("gradients", worst, GradCheckOptions::default().tolerance);
    Ok((status, format!("{checked} parameter checks, {detail}")))
}

fn mask_exactness(opts: &VerifyOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 2);
    let mut worst_row: f64 = 0.0;
    for k in 0..opts.instances {
        let b = rng.random_range(2..24);
        let z = l2_normalize_rows(&uniform(b, 3, -1.0, 1.0, &mut rng))?;
        let params = AttentionConfig { d_k: 4, ..AttentionConfig::default() }.init(3, k as u64)?;
        let lsh = LshConfig {
            chunk_size: rng.random_range(1..6),
            rounds: rng.random_range(1..4),
            adjacency: if rng.random::<bool>() { Adjacency::None } else { Adjacency::Adjacent },
            seed: k as u64,
            ..LshConfig::default()
        };
        let supports = build_supports(&z, &lsh)?;
        let plain = sparse_attention_scores(&z, &params, &supports)?;

        let mut tape = Tape::new();
        let (zv, wq, wk) = (tape.leaf(z.clone()), tape.leaf(params.w_q.clone()), tape.leaf(params.w_k.clone()));
        let pv = sparse_attention_scores_var(&mut tape, zv, wq, wk, params.rho, &supports)?;
        let taped = tape.value(pv);
        for i in 0..b {
            let sum: f64 = plain.matrix().row(i).iter().sum();
            worst_row = worst_row.max((sum - 1.0).abs());
            for j in 0..b {
                let off = !supports.contains(i, j);
                if off && (plain.matrix().get(i, j).to_bits() != 0 || taped.get(i, j).to_bits() != 0) {
                    return Ok((Status::Failed(format!("instance {k}: P[{i}][{j}] off support is not exactly 0")), String::new()));
                }
            }
        }
        if plain.matrix().max_abs_diff(taped)? > 1e-15 {
            return Ok((Status::Failed(format!("instance {k}: tape and direct sparse scores differ")), String::new()));
        }
    }
    Ok(threshold("row sums", worst_row, 1e-12))
}

/// Explicit `(K + λI)⁻¹` by Gauss–Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = Matrix::identity(n);
    for c in 0..n {
        let pivot = (c..n)
            .max_by(|&i, &j| m.get(i, c).abs().total_cmp(&m.get(j, c).abs()))
            .expect("non-empty");
        if m.get(pivot, c).abs() < 1e-300 {
            return Err(Error::Invalid("singular matrix".into()));
        }
        for j in 0..n {
            let (t, ti) = (m.get(c, j), inv.get(c, j));
            m.set(c, j, m.get(pivot, j));
            m.set(pivot, j, t);
            inv.set(c, j, inv.get(pivot, j));
            inv.set(pivot, j, ti);
        }
        let d = m.get(c, c);
        for j in 0..n {
            m.set(c, j, m.get(c, j) / d);
            inv.set(c, j, inv.get(c, j) / d);
        }
        for i in (0..n).filter(|&i| i != c) {
            let f = m.get(i, c);
            if f != 0.0 {
                for j in 0..n {
                    m.set(i, j, m.get(i, j) - f * m.get(c, j));
                    inv.set(i, j, inv.get(i, j) - f * inv.get(c, j));
                }
            }
        }
    }
    Ok(inv)
}

fn cclk_oracle(opts: &VerifyOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 3);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.instances {
        let b = rng.random_range(1..=8);
        let a = uniform(b, b, -1.0, 1.0, &mut rng);
        let k = a.matmul_transposed(&a)?.zip_map(&Matrix::identity(b).scale(0.1), "spd", |x, y| x + y)?;
        let lambda = rng.random_range(0.0..0.5);
        let u = random_u(b, &mut rng);
        let mut shifted = k.clone();
        for i in 0..b {
            shifted.set(i, i, k.get(i, i) + lambda);
        }
        let x = gauss_jordan_inverse(&shifted)?.matmul(&k)?;
        let oracle: Vec<f64> = (0..b)
            .map(|i| (0..b).map(|j| u.matrix().get(i, j) * x.get(j, i)).sum())
            .collect();
        worst = worst.max(max_gap(&cclk_score(&u, &k, lambda)?, &oracle));

        let eye = Matrix::identity(b);
        let d = u.positives();
        let halves: Vec<f64> = d.iter().map(|v| v / 2.0).collect();
        let exact = max_gap(&cclk_score(&u, &eye, 0.0)?, &d).max(max_gap(&cclk_score(&u, &eye, 1.0)?, &halves));
        if exact > 1e-12 {
            return Ok((Status::Failed(format!("identity kernel case off by {exact:.3e}")), String::new()));
        }
    }
    Ok(threshold("cclk vs explicit inverse", worst, 1e-8))
}

fn uniform_reduction(opts: &VerifyOptions) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 4);
    let mut worst: f64 = 0.0;
    for k in 0..opts.instances {
        let b = rng.random_range(2..33);
        let row: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
        let z = prepare_protected(&Matrix::from_rows(&vec![row; b])?, true)?;
        let params = AttentionConfig { d_k: 5, ..AttentionConfig::default() }.init(3, k as u64)?;
        let u = random_u(b, &mut rng);
        let loss = farecontrast_loss(&u, &fare(&u, &attention_scores(&z, &params)?)?)?;
        let m = u.matrix();
        let expect = (0..b)
            .map(|i| {
                let mean = m.row(i).iter().sum::<f64>() / b as f64;
                (mean / m.get(i, i)).ln_1p()
            })
            .sum::<f64>()
            / b as f64;
        worst = worst.max((loss - expect).abs());
    }
    Ok(threshold("identical z vs mean-negative InfoNCE", worst, 1e-12))
}

fn value_collapse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let u = random_u(16, &mut rng);
    let z = prepare_protected(&uniform(16, 3, 0.1, 1.0, &mut rng), true)?;
    let params = AttentionConfig::default().init(3, 0)?;
    let o = fare(&u, &attention_scores(&z, &params)?)?;
    let scaled: Vec<f64> = o.iter().map(|v| v * 1e-12).collect();
    let collapsed = farecontrast_loss(&u, &scaled)?;
    if !(collapsed < 1e-9) {
        return Ok((Status::Failed(format!("scaled output left loss at {collapsed:e}")), String::new()));
    }
    let mut doc = serde_json::to_value(&params)?;
    doc["w_v"] = serde_json::to_value(Matrix::identity(3))?;
    if serde_json::from_value::<AttentionParams>(doc).is_ok() {
        return Ok((Status::Failed("attention parameters accepted a value projection".into()), String::new()));
    }
    Ok((
        Status::Passed,
        format!("value weight 1e-12 drives the loss to {collapsed:.3e}; no value projection exists"),
    ))
}
