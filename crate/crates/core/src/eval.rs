//! Linear probe accuracy, bias-removal MSE and equalized odds.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Cholesky, Matrix};

const OLS_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Column means and scales of the training split. Constant columns keep
/// scale 1 so they standardize to zero.
fn standardizer(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn standardize(x: &Matrix, mean: &[f64], scale: &[f64]) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for ((v, m), s) in out.row_mut(i).iter_mut().zip(mean).zip(scale) {
            *v = (*v - m) / s;
        }
    }
    out
}

fn check_rows(emb: &Matrix, n: usize, what: &str) -> Result<()> {
    if emb.rows() != n {
        return Err(Error::Invalid(format!(
            "{what}: {} embedding rows but {n} targets",
            emb.rows()
        )));
    }
    Ok(())
}

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized embeddings.
pub fn linear_probe(
    train_emb: &Matrix,
    train_labels: &[usize],
    test_emb: &Matrix,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    check_rows(train_emb, train_labels.len(), "probe train")?;
    check_rows(test_emb, test_labels.len(), "probe test")?;
    if train_emb.cols() != test_emb.cols() {
        return Err(Error::Invalid("probe: train and test embedding widths differ".into()));
    }
    let distinct: BTreeSet<usize> = train_labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Invalid("probe: training labels contain a single class".into()));
    }
    if test_labels.is_empty() {
        return Err(Error::Invalid("probe: empty test split".into()));
    }
    let k = 1 + train_labels.iter().chain(test_labels).max().copied().unwrap_or(0);
    let (mean, scale) = standardizer(train_emb);
    let x = standardize(train_emb, &mean, &scale);
    let (n, d) = x.shape();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 0.01).expect("valid sd");
    let mut w: Vec<f64> = (0..d * k).map(|_| init.sample(&mut rng)).collect();
    let mut b = vec![0.0; k];
    let mut gw = vec![0.0; d * k];
    let mut gb = vec![0.0; k];
    let mut p = vec![0.0; k];
    let step = cfg.learning_rate / n as f64;

    for _ in 0..cfg.iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for (i, &y) in train_labels.iter().enumerate() {
            let row = x.row(i);
            logits(row, &w, &b, &mut p);
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for (c, &r) in p.iter().enumerate() {
                gb[c] += r;
            }
            for (f, &v) in row.iter().enumerate() {
                let g = &mut gw[f * k..(f + 1) * k];
                for (gc, &r) in g.iter_mut().zip(&p) {
                    *gc += v * r;
                }
            }
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= step * g;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= step * g;
        }
    }

    let xt = standardize(test_emb, &mean, &scale);
    let predictions: Vec<usize> = (0..xt.rows())
        .map(|i| {
            logits(xt.row(i), &w, &b, &mut p);
            argmax(&p)
        })
        .collect();
    let correct = predictions.iter().zip(test_labels).filter(|(a, b)| a == b).count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test_labels.len() as f64,
        predictions,
    })
}

fn logits(row: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let k = b.len();
    out.copy_from_slice(b);
    for (f, &v) in row.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[f * k..(f + 1) * k]) {
            *o += v * wv;
        }
    }
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn linear_probe_accuracy(
    train_emb: &Matrix,
    train_labels: &[usize],
    test_emb: &Matrix,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    linear_probe(train_emb, train_labels, test_emb, test_labels, cfg).map(|r| r.accuracy)
}

/// Test MSE of a least-squares map from embeddings to protected vectors,
/// averaged over components. Higher means less recoverable information.
pub fn bias_removal_mse(
    train_emb: &Matrix,
    train_protected: &Matrix,
    test_emb: &Matrix,
    test_protected: &Matrix,
) -> Result<f64> {
    check_rows(train_emb, train_protected.rows(), "bias train")?;
    check_rows(test_emb, test_protected.rows(), "bias test")?;
    let (n, d) = train_emb.shape();
    let m = train_protected.cols();
    if test_emb.cols() != d || test_protected.cols() != m {
        return Err(Error::Invalid("bias: train and test widths differ".into()));
    }
    if n < d + 1 {
        return Err(Error::Invalid(format!(
            "bias: {n} training rows cannot determine {d} slopes plus an intercept"
        )));
    }
    if test_emb.rows() == 0 {
        return Err(Error::Invalid("bias: empty test split".into()));
    }
    let (x_mean, _) = standardizer(train_emb);
    let (z_mean, _) = standardizer(train_protected);
    let xc = center(train_emb, &x_mean);
    let zc = center(train_protected, &z_mean);

    let mut gram = xc.transpose().matmul(&xc)?;
    for j in 0..d {
        gram.set(j, j, gram.get(j, j) + OLS_RIDGE);
    }
    let rhs = xc.transpose().matmul(&zc)?;
    let coef = Cholesky::factor(&gram)?.solve(&rhs)?;

    let pred = center(test_emb, &x_mean).matmul(&coef)?;
    let mut total = 0.0;
    for i in 0..pred.rows() {
        for ((p, z), mu) in pred.row(i).iter().zip(test_protected.row(i)).zip(&z_mean) {
            let e = p + mu - z;
            total += e * e;
        }
    }
    Ok(total / (pred.rows() * m) as f64)
}

fn center(x: &Matrix, mean: &[f64]) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(mean) {
            *v -= m;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedPredictions {
    predicted: Vec<usize>,
    truth: Vec<usize>,
    groups: Vec<usize>,
}

impl GroupedPredictions {
    pub fn new(predicted: Vec<usize>, truth: Vec<usize>, groups: Vec<usize>) -> Result<Self> {
        if predicted.len() != truth.len() || truth.len() != groups.len() {
            return Err(Error::Invalid(format!(
                "grouped predictions: lengths {}, {}, {} differ",
                predicted.len(),
                truth.len(),
                groups.len()
            )));
        }
        Ok(Self {
            predicted,
            truth,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

/// Group ids from the binary code of protected vectors whose components
/// are all 0 or 1; `None` for continuous attributes.
pub fn binary_groups(protected: &Matrix) -> Option<Vec<usize>> {
    if protected.cols() >= usize::BITS as usize {
        return None;
    }
    (0..protected.rows())
        .map(|i| {
            protected.row(i).iter().enumerate().try_fold(0usize, |acc, (bit, &v)| {
                if v == 1.0 {
                    Some(acc | (1 << bit))
                } else if v == 0.0 {
                    Some(acc)
                } else {
                    None
                }
            })
        })
        .collect()
}

/// Largest, over group pairs, of the mean absolute gap in
/// `P(Ŷ = ŷ | Y = y)` across all (y, ŷ) cells. A single group gives 0.
///
/// Every group must contain each label that occurs overall, otherwise
/// its conditional rates are undefined and the call fails. Gaps are summed
/// as exact fractions of counts where they fit in 128 bits.
pub fn equalized_odds(gp: &GroupedPredictions) -> Result<f64> {
    let labels: BTreeSet<usize> = gp.truth.iter().copied().collect();
    let outcomes: BTreeSet<usize> = gp.truth.iter().chain(&gp.predicted).copied().collect();
    let groups: Vec<usize> = gp.groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();

    let mut counts: BTreeMap<(usize, usize, usize), u64> = BTreeMap::new();
    let mut totals: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for ((&s, &y), &yh) in gp.groups.iter().zip(&gp.truth).zip(&gp.predicted) {
        *counts.entry((s, y, yh)).or_default() += 1;
        *totals.entry((s, y)).or_default() += 1;
    }
    for &s in &groups {
        for &y in &labels {
            if !totals.contains_key(&(s, y)) {
                return Err(Error::UndefinedConditional { group: s, label: y });
            }
        }
    }
    let count = |s, y, yh| counts.get(&(s, y, yh)).copied().unwrap_or(0);
    let cells = (labels.len() * outcomes.len()) as u64;

    let mut worst: f64 = 0.0;
    for (k, &a) in groups.iter().enumerate() {
        for &b in &groups[k + 1..] {
            let mut exact = Some((0u128, 1u128));
            let mut approx = 0.0;
            for &y in &labels {
                let (na, nb) = (totals[&(a, y)], totals[&(b, y)]);
                let num: u64 = outcomes
                    .iter()
                    .map(|&yh| (count(a, y, yh) * nb).abs_diff(count(b, y, yh) * na))
                    .sum();
                let den = na * nb;
                approx += num as f64 / den as f64;
                exact = exact.and_then(|acc| add_fraction(acc, (num as u128, den as u128)));
            }
            let mean = match exact.and_then(|(n, d)| Some((n, d.checked_mul(cells as u128)?))) {
                Some((n, d)) => n as f64 / d as f64,
                None => approx / cells as f64,
            };
            worst = worst.max(mean);
        }
    }
    Ok(worst)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn add_fraction((n1, d1): (u128, u128), (n2, d2): (u128, u128)) -> Option<(u128, u128)> {
    let g = gcd(d1, d2);
    let den = (d1 / g).checked_mul(d2)?;
    let num = n1.checked_mul(d2 / g)?.checked_add(n2.checked_mul(d1 / g)?)?;
    let r = gcd(num, den).max(1);
    Some((num / r, den / r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub probe_accuracy: f64,
    pub bias_mse: f64,
    pub equalized_odds: Option<f64>,
    pub wall_times: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.probe_accuracy)
            && self.bias_mse >= 0.0
            && self.bias_mse.is_finite()
            && self.equalized_odds.is_none_or(|e| (0.0..=1.0).contains(&e))
            && self.wall_times.values().all(|t| t.is_finite() && *t >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("metrics out of range: {self:?}")))
        }
    }
}

/// Embeddings are frozen encoder outputs for each split.
pub struct EvalSplit<'a> {
    pub embeddings: &'a Matrix,
    pub labels: &'a [usize],
    pub protected: &'a Matrix,
}

/// Runs all three metrics. Equalized odds is reported only when the
/// protected attribute is binary.
pub fn evaluate(train: &EvalSplit, test: &EvalSplit, probe: &ProbeConfig) -> Result<MetricsReport> {
    let mut wall_times = BTreeMap::new();
    let clock = std::time::Instant::now();
    let fit = linear_probe(train.embeddings, train.labels, test.embeddings, test.labels, probe)?;
    wall_times.insert("probe".to_string(), clock.elapsed().as_secs_f64());

    let clock = std::time::Instant::now();
    let bias_mse = bias_removal_mse(train.embeddings, train.protected, test.embeddings, test.protected)?;
    wall_times.insert("bias_removal".to_string(), clock.elapsed().as_secs_f64());

    let clock = std::time::Instant::now();
    let equalized_odds = match binary_groups(test.protected) {
        Some(groups) => Some(equalized_odds(&GroupedPredictions::new(
            fit.predictions,
            test.labels.to_vec(),
            groups,
        )?)?),
        None => None,
    };
    wall_times.insert("equalized_odds".to_string(), clock.elapsed().as_secs_f64());

    Ok(MetricsReport {
        probe_accuracy: fit.accuracy,
        bias_mse,
        equalized_odds,
        wall_times,
    })
}
