use farecontrast::data::{generate_synthetic, Dataset, SynthConfig};
use farecontrast::harness::{train, TrainConfig};
use farecontrast::losses::{LossConfig, LossKind};
use farecontrast::numerics::Matrix;
use farecontrast::sparse::LshConfig;

fn data(n_train: usize, n_test: usize) -> Dataset {
    generate_synthetic(&SynthConfig { n_train, n_test, ..SynthConfig::default() }).unwrap()
}

fn small(kind: LossKind) -> TrainConfig {
    TrainConfig { loss: LossConfig::new(kind), epochs: 2, batch_size: 16, ..TrainConfig::default() }
}

fn params_gap(a: &[&Matrix], b: &[&Matrix]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y).unwrap()).fold(0.0, f64::max)
}

#[test]
fn sparse_with_full_supports_follows_dense_trajectory() {
    let d = data(96, 40);
    let dense = train(&TrainConfig { epochs: 3, ..small(LossKind::Farecontrast) }, &d).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        sparse: Some(LshConfig { chunk_size: 16, ..LshConfig::default() }),
        ..small(LossKind::SparseFarecontrast)
    };
    let sparse = train(&cfg, &d).unwrap();
    for (a, b) in dense.history.iter().zip(&sparse.history) {
        assert!((a.loss - b.loss).abs() <= 1e-10, "epoch {}: {} vs {}", a.epoch, a.loss, b.loss);
    }
    let enc = params_gap(&dense.model.encoder.matrices(), &sparse.model.encoder.matrices());
    assert!(enc <= 1e-10, "encoder drift {enc:e}");
    let (da, sa) = (dense.model.attention.unwrap(), sparse.model.attention.unwrap());
    assert!(params_gap(&[&da.w_q, &da.w_k], &[&sa.w_q, &sa.w_k]) <= 1e-10);
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let d = data(64, 40);
    for kind in [LossKind::Farecontrast, LossKind::SparseFarecontrast, LossKind::FairInfonceCluster] {
        let a = train(&small(kind), &d).unwrap();
        let b = train(&small(kind), &d).unwrap();
        let strip = |r: &farecontrast::harness::RunArtifacts| {
            r.history.iter().map(|h| (h.epoch, h.loss.to_bits(), h.lr.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.model, b.model);
        assert_eq!(a.metrics.probe_accuracy.to_bits(), b.metrics.probe_accuracy.to_bits());
        assert_eq!(a.metrics.bias_mse.to_bits(), b.metrics.bias_mse.to_bits());
    }
}

#[test]
fn different_seeds_diverge() {
    let d = data(64, 40);
    let a = train(&small(LossKind::Farecontrast), &d).unwrap();
    let b = train(&TrainConfig { seed: 1, ..small(LossKind::Farecontrast) }, &d).unwrap();
    assert_ne!(a.model, b.model);
}

#[test]
fn two_epochs_reduce_the_loss() {
    let d = data(64, 40);
    for kind in [LossKind::Farecontrast, LossKind::Infonce, LossKind::Cclk] {
        let run = train(&small(kind), &d).unwrap();
        assert!(run.history[1].loss < run.history[0].loss, "{kind:?}: {:?}", run.history);
    }
}

#[test]
fn unrelated_protected_attribute_cannot_be_recovered() {
    let d = generate_synthetic(&SynthConfig {
        n_train: 256,
        n_test: 400,
        protected_scale: 0.0,
        correlation: 0.0,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let run = train(&TrainConfig { epochs: 1, batch_size: 32, ..small(LossKind::Farecontrast) }, &d).unwrap();
    let z = farecontrast::data::protected_matrix(&d.test).unwrap();
    let n = z.rows() as f64;
    let var = (0..z.cols())
        .map(|c| {
            let m = (0..z.rows()).map(|i| z.get(i, c)).sum::<f64>() / n;
            (0..z.rows()).map(|i| (z.get(i, c) - m).powi(2)).sum::<f64>() / n
        })
        .sum::<f64>()
        / z.cols() as f64;
    assert!(run.metrics.bias_mse >= 0.9 * var, "mse {} vs variance {var}", run.metrics.bias_mse);
}

#[test]
fn correlation_sets_the_label_explained_share_of_protected_variance() {
    let d = generate_synthetic(&SynthConfig { n_train: 20_000, n_test: 10, correlation: 0.9, ..SynthConfig::default() }).unwrap();
    let k = 10;
    let dz = d.train[0].protected.len();
    let mut share = 0.0;
    for c in 0..dz {
        let all: Vec<f64> = d.train.iter().map(|r| r.protected[c]).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let total: f64 = all.iter().map(|v| (v - mean).powi(2)).sum();
        let mut between = 0.0;
        for y in 0..k {
            let g: Vec<f64> = d.train.iter().filter(|r| r.label == y).map(|r| r.protected[c]).collect();
            let gm = g.iter().sum::<f64>() / g.len() as f64;
            between += g.len() as f64 * (gm - mean).powi(2);
        }
        share += between / total / dz as f64;
    }
    assert!((share - 0.81).abs() < 0.05, "between-class share {share}");
}
