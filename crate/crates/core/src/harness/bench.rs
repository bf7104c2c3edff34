//! Wall-clock comparison of FARE, SparseFARE and CCLK conditioning.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::fare::{attention_scores, fare, prepare_protected, AttentionConfig};
use crate::kernels::{kernel_matrix, KernelSpec};
use crate::losses::cclk_score;
use crate::numerics::Matrix;
use crate::sparse::{build_supports, sparse_attention_scores, sparse_fare, LshConfig};

pub const BENCH_HEADER: &str = "mechanism,batch_size,median_seconds";
pub const MECHANISMS: [&str; 3] = ["fare", "sparse_fare", "cclk"];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mechanism: &'static str,
    pub batch_size: usize,
    pub median_seconds: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median time of each mechanism's conditioned score per batch size.
pub fn bench(sizes: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() || reps == 0 {
        return Err(Error::Config("bench needs at least one size and one repetition".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] < 2 {
        return Err(Error::Config(format!("sizes must be strictly ascending and at least 2: {sizes:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attention = AttentionConfig::default().init(3, seed)?;
    let lsh = LshConfig::default();
    let kernel = KernelSpec::default();
    let lambda = 1e-3;

    let mut rows = Vec::new();
    for &b in sizes {
        let z_raw = Matrix::new(b, 3, (0..b * 3).map(|_| rng.random_range(0.05..1.0)).collect())?;
        let z = prepare_protected(&z_raw, true)?;
        let u = SimilarityMatrix::new(Matrix::new(
            b,
            b,
            (0..b * b).map(|_| (rng.random_range(-1.0..1.0) / 0.5f64).exp()).collect(),
        )?)?;
        for mechanism in MECHANISMS {
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let clock = Instant::now();
                let o = match mechanism {
                    "fare" => fare(&u, &attention_scores(&z, &attention)?)?,
                    "sparse_fare" => {
                        let s = build_supports(&z, &lsh)?;
                        sparse_fare(&u, &sparse_attention_scores(&z, &attention, &s)?, &s)?
                    }
                    _ => cclk_score(&u, &kernel_matrix(&z_raw, &kernel)?, lambda)?,
                };
                times.push(clock.elapsed().as_secs_f64());
                std::hint::black_box(o);
            }
            rows.push(BenchRow {
                mechanism,
                batch_size: b,
                median_seconds: median(times),
            });
        }
    }
    Ok(rows)
}

fn time_of(rows: &[BenchRow], mechanism: &str, b: usize) -> Option<f64> {
    rows.iter()
        .find(|r| r.mechanism == mechanism && r.batch_size == b)
        .map(|r| r.median_seconds)
}

/// `(batch_size, cclk / fare)` in size order.
pub fn cclk_fare_ratios(rows: &[BenchRow]) -> Vec<(usize, f64)> {
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.batch_size).collect();
    sizes.dedup();
    sizes
        .into_iter()
        .filter_map(|b| Some((b, time_of(rows, "cclk", b)? / time_of(rows, "fare", b)?)))
        .collect()
}

pub fn check_ratio_trend(rows: &[BenchRow]) -> Result<()> {
    let ratios = cclk_fare_ratios(rows);
    if ratios.windows(2).all(|w| w[1].1 > w[0].1) {
        Ok(())
    } else {
        let shown: Vec<String> = ratios.iter().map(|(b, r)| format!("{b}: {r:.2}")).collect();
        Err(Error::Invalid(format!(
            "CCLK/FARE time ratio is not strictly increasing ({})",
            shown.join(", ")
        )))
    }
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], mut out: W) -> Result<()> {
    writeln!(out, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.mechanism, r.batch_size, r.median_seconds)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    write_bench_csv(rows, std::io::BufWriter::new(std::fs::File::create(path)?))
}
