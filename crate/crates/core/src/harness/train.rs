use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::mix_seed;
use super::model::ModelParams;
use super::objective::{Conditioning, Trainable};
use super::optim::Optimizer;
use crate::data::{features_matrix, labels, protected_matrix, BatchTriplet, Dataset};
use crate::encoder::init_params;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSplit, MetricsReport, ProbeConfig};

const INIT_ENCODER: u64 = 1;
const INIT_ATTENTION: u64 = 2;
const SHUFFLE: u64 = 3;
const AUGMENT: u64 = 4;
const CONDITION: u64 = 5;

pub const HISTORY_HEADER: &str = "epoch,loss,lr,seconds";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub model: ModelParams,
    pub history: Vec<HistoryRow>,
    pub metrics: MetricsReport,
}

impl RunArtifacts {
    /// Writes `model.json` and `metrics.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save(&dir.join("model.json"))?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&self.metrics)?)?;
        Ok(())
    }
}

/// Appends history rows to a CSV file, flushing after each one.
pub struct HistoryWriter {
    out: BufWriter<File>,
}

impl HistoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{HISTORY_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, row: &HistoryRow) -> Result<()> {
        writeln!(self.out, "{},{},{},{}", row.epoch, row.loss, row.lr, row.seconds)?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = std::fs::read_to_string(path)?;
    let source = path.display().to_string();
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::Parse {
            path: source,
            line: 1,
            message: format!("expected header `{HISTORY_HEADER}`"),
        });
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let bad = || Error::Parse {
                path: source.clone(),
                line: k as u64 + 2,
                message: format!("malformed history row `{line}`"),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(HistoryRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
                seconds: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<RunArtifacts> {
    train_with_sink(cfg, data, &mut |_| Ok(()))
}

/// Trains and evaluates; `sink` sees each history row as soon as its
/// epoch ends.
pub fn train_with_sink(
    cfg: &TrainConfig,
    data: &Dataset,
    sink: &mut dyn FnMut(&HistoryRow) -> Result<()>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::Invalid("training split is empty".into()))?;
    let (d_x, d_z) = (first.features.len(), first.protected.len());
    let n = data.train.len();
    if cfg.epochs > 0 && n < cfg.batch_size {
        return Err(Error::Invalid(format!(
            "{n} training records cannot fill one batch of {}",
            cfg.batch_size
        )));
    }
    let started = Instant::now();

    let encoder = init_params(&cfg.encoder.widths(d_x), mix_seed(cfg.seed, INIT_ENCODER))?;
    let attention = if cfg.loss.uses_attention() {
        Some(cfg.attention.init(d_z, mix_seed(cfg.seed, INIT_ATTENTION))?)
    } else {
        None
    };
    let mut params = Trainable { encoder, attention };
    let shapes: Vec<(usize, usize)> = params.matrices().iter().map(|m| m.shape()).collect();
    let mut opt = Optimizer::new(&cfg.optimizer, &shapes);

    let batches = n / cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let clock = Instant::now();
        let lr = cfg.schedule.learning_rate(cfg.optimizer.learning_rate, epoch, cfg.epochs);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            mix_seed(cfg.seed, SHUFFLE),
            epoch as u64,
        )));
        let mut total = 0.0;
        for batch in 0..batches {
            let idx = &order[batch * cfg.batch_size..(batch + 1) * cfg.batch_size];
            let t = BatchTriplet::assemble(
                &data.train,
                idx,
                &cfg.augment,
                mix_seed(mix_seed(cfg.seed, AUGMENT), step),
            )?;
            let cond = Conditioning::prepare(cfg, &t.z, mix_seed(mix_seed(cfg.seed, CONDITION), step))?;
            let (loss, grads) = params.loss_and_gradients(&t.x, &t.y, &cfg.scoring, &cond)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch,
                    norms: params.norms(),
                });
            }
            opt.step(&mut params.matrices_mut(), &grads, lr);
            total += loss;
            step += 1;
        }
        let row = HistoryRow {
            epoch,
            loss: total / batches as f64,
            lr,
            seconds: clock.elapsed().as_secs_f64(),
        };
        sink(&row)?;
        history.push(row);
    }
    let train_seconds = started.elapsed().as_secs_f64();

    let model = ModelParams {
        encoder: params.encoder,
        attention: params.attention,
        tau: cfg.scoring.tau,
    };
    let mut metrics = evaluate_model(&model, data, &cfg.probe)?;
    metrics.wall_times.insert("train".into(), train_seconds);
    Ok(RunArtifacts {
        model,
        history,
        metrics,
    })
}

/// Probe accuracy, bias-removal MSE and, for binary attributes, equalized
/// odds of a frozen encoder.
pub fn evaluate_model(model: &ModelParams, data: &Dataset, probe: &ProbeConfig) -> Result<MetricsReport> {
    let clock = Instant::now();
    let train_emb = model.embed(&features_matrix(&data.train)?)?;
    let test_emb = model.embed(&features_matrix(&data.test)?)?;
    let embed_seconds = clock.elapsed().as_secs_f64();
    let (train_z, test_z) = (protected_matrix(&data.train)?, protected_matrix(&data.test)?);
    let (train_y, test_y) = (labels(&data.train), labels(&data.test));
    let mut report = evaluate(
        &EvalSplit {
            embeddings: &train_emb,
            labels: &train_y,
            protected: &train_z,
        },
        &EvalSplit {
            embeddings: &test_emb,
            labels: &test_y,
            protected: &test_z,
        },
        probe,
    )?;
    report.wall_times.insert("embed".into(), embed_seconds);
    Ok(report)
}
