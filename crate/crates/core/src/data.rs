//! Synthetic records with a protected attribute, attribute-preserving
//! augmentation, and CSV storage.
//!
//! Features mix a class prototype, a linear image of the protected vector
//! and Gaussian noise. `correlation` pulls each protected vector toward a
//! per-class code; each component then has Pearson correlation
//! `|correlation|` with that code.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub features: Vec<f64>,
    pub label: usize,
    /// Every component lies in `[0, 1]`.
    pub protected: Vec<f64>,
}

/// How protected vectors are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtectedKind {
    /// Uniform on the unit cube, mixed with a uniform class colour code.
    #[default]
    Continuous,
    /// One-hot group indicator; with probability `|correlation|` the group
    /// is `label mod d_protected`, otherwise uniform.
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub d_features: usize,
    pub n_classes: usize,
    pub d_protected: usize,
    pub label_scale: f64,
    pub protected_scale: f64,
    pub correlation: f64,
    pub noise_sd: f64,
    pub protected: ProtectedKind,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 500,
            d_features: 32,
            n_classes: 10,
            d_protected: 3,
            label_scale: 1.0,
            protected_scale: 2.0,
            correlation: 0.9,
            noise_sd: 0.5,
            protected: ProtectedKind::Continuous,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Two one-hot groups, for equalized-odds evaluation.
    pub fn binary_preset() -> Self {
        Self {
            d_protected: 2,
            protected: ProtectedKind::OneHot,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be at least 1");
        }
        if self.d_features == 0 || self.d_protected == 0 {
            return bad("d_features and d_protected must be at least 1");
        }
        if self.n_classes < 1 {
            return bad("n_classes must be at least 1");
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be positive and finite");
        }
        if !(-1.0..=1.0).contains(&self.correlation) {
            return bad("correlation must lie in [-1, 1]");
        }
        if !self.label_scale.is_finite() || !self.protected_scale.is_finite() {
            return bad("scales must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Record>,
    pub test: Vec<Record>,
}

/// Deterministic in `cfg`; train records are drawn before test records from
/// one stream.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dx, dz, k) = (cfg.d_features, cfg.d_protected, cfg.n_classes);

    let prototypes: Vec<f64> = (0..k * dx).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mixing: Vec<f64> = (0..dz * dx).map(|_| StandardNormal.sample(&mut rng)).collect();
    let codes: Vec<f64> = (0..k * dz).map(|_| rng.random::<f64>()).collect();
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::Config(e.to_string()))?;

    // Weights chosen so each component correlates with its class code at
    // exactly |correlation| while staying inside the unit cube.
    let strength = cfg.correlation.abs();
    let spread = (1.0 - strength * strength).sqrt();
    let (w_noise, w_code) = (spread / (spread + strength), strength / (spread + strength));
    let draw = |rng: &mut ChaCha8Rng| {
        let label = rng.random_range(0..k);
        let code = &codes[label * dz..(label + 1) * dz];
        let protected: Vec<f64> = match cfg.protected {
            ProtectedKind::Continuous => code
                .iter()
                .map(|&m| {
                    let target = if cfg.correlation < 0.0 { 1.0 - m } else { m };
                    let u: f64 = rng.random();
                    (w_noise * u + w_code * target).clamp(0.0, 1.0)
                })
                .collect(),
            ProtectedKind::OneHot => {
                let group = if rng.random::<f64>() < strength {
                    if cfg.correlation < 0.0 {
                        (dz - 1) - label % dz
                    } else {
                        label % dz
                    }
                } else {
                    rng.random_range(0..dz)
                };
                (0..dz).map(|g| if g == group { 1.0 } else { 0.0 }).collect()
            }
        };
        let proto = &prototypes[label * dx..(label + 1) * dx];
        let features = (0..dx)
            .map(|c| {
                let embedded: f64 = (0..dz).map(|r| protected[r] * mixing[r * dx + c]).sum();
                cfg.label_scale * proto[c] + cfg.protected_scale * embedded + noise.sample(rng)
            })
            .collect();
        Record {
            features,
            label,
            protected,
        }
    };

    let train = (0..cfg.n_train).map(|_| draw(&mut rng)).collect();
    let test = (0..cfg.n_test).map(|_| draw(&mut rng)).collect();
    Ok(Dataset { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub noise_sd: f64,
    pub dropout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sd: 0.1,
            dropout: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config("augment: noise_sd must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("augment: dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Jitters and drops feature coordinates; label and protected vector are
/// copied unchanged.
pub fn augment(record: &Record, cfg: &AugmentConfig, seed: u64) -> Record {
    augment_with(record, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn augment_with<R: Rng + ?Sized>(record: &Record, cfg: &AugmentConfig, rng: &mut R) -> Record {
    let features = record
        .features
        .iter()
        .map(|&v| {
            let jitter: f64 = StandardNormal.sample(rng);
            let keep = cfg.dropout == 0.0 || rng.random::<f64>() >= cfg.dropout;
            if keep {
                v + cfg.noise_sd * jitter
            } else {
                0.0
            }
        })
        .collect();
    Record {
        features,
        label: record.label,
        protected: record.protected.clone(),
    }
}

/// One minibatch: two augmented views of each record and its exact
/// protected vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTriplet {
    pub x: Matrix,
    pub y: Matrix,
    pub z: Matrix,
}

impl BatchTriplet {
    pub fn assemble(
        records: &[Record],
        indices: &[usize],
        cfg: &AugmentConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut xs, mut ys, mut zs) = (Vec::new(), Vec::new(), Vec::new());
        for &i in indices {
            let r = records
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("record index {i} out of range")))?;
            let a = augment_with(r, cfg, &mut rng);
            let b = augment_with(r, cfg, &mut rng);
            debug_assert!(a.label == b.label && a.protected == r.protected && b.protected == r.protected);
            xs.push(a.features);
            ys.push(b.features);
            zs.push(r.protected.clone());
        }
        Ok(Self {
            x: Matrix::from_rows(&xs)?,
            y: Matrix::from_rows(&ys)?,
            z: Matrix::from_rows(&zs)?,
        })
    }

    /// Unaugmented view pair, used for evaluation and tests.
    pub fn identity(records: &[Record]) -> Result<Self> {
        let x = features_matrix(records)?;
        Ok(Self {
            y: x.clone(),
            x,
            z: protected_matrix(records)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.x.rows()
    }
}

pub fn features_matrix(records: &[Record]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.features.as_slice()).collect();
    Ok(Matrix::from_rows(&rows)?)
}

pub fn protected_matrix(records: &[Record]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.protected.as_slice()).collect();
    Ok(Matrix::from_rows(&rows)?)
}

pub fn labels(records: &[Record]) -> Vec<usize> {
    records.iter().map(|r| r.label).collect()
}

pub fn csv_header(d_features: usize, d_protected: usize) -> Vec<String> {
    (0..d_features)
        .map(|i| format!("f{i}"))
        .chain(std::iter::once("label".to_string()))
        .chain((0..d_protected).map(|i| format!("z{i}")))
        .collect()
}

/// Writes records with shortest round-trip decimal formatting.
pub fn write_csv<W: Write>(records: &[Record], out: W) -> Result<()> {
    let (dx, dz) = match records.first() {
        Some(r) => (r.features.len(), r.protected.len()),
        None => return Err(Error::Invalid("cannot write an empty record set".into())),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(csv_header(dx, dz)).map_err(csv_io)?;
    let mut row = Vec::with_capacity(dx + dz + 1);
    for (k, r) in records.iter().enumerate() {
        if r.features.len() != dx || r.protected.len() != dz {
            return Err(Error::Invalid(format!("record {k} has inconsistent dimensions")));
        }
        row.clear();
        row.extend(r.features.iter().map(|v| v.to_string()));
        row.push(r.label.to_string());
        row.extend(r.protected.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(records: &[Record], path: &Path) -> Result<()> {
    write_csv(records, BufWriter::new(File::create(path)?))
}

pub fn load_csv(path: &Path) -> Result<Vec<Record>> {
    read_csv(File::open(path)?, &path.display().to_string())
}

/// Parses records; `source` names the input in error messages.
pub fn read_csv<R: Read>(input: R, source: &str) -> Result<Vec<Record>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut rows = reader.records();

    let header = match rows.next() {
        Some(h) => h.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "missing header".into())),
    };
    let label_col = header.iter().position(|h| h == "label");
    let (dx, dz) = match label_col {
        Some(c) => (c, header.len() - c - 1),
        None => (0, 0),
    };
    let expected = csv_header(dx, dz);
    if label_col.is_none() || !header.iter().eq(expected.iter().map(String::as_str)) || dz == 0 {
        let shown = if label_col.is_some() && dz > 0 {
            expected.join(",")
        } else {
            "f0,...,f{d-1},label,z0,...,z{m-1}".to_string()
        };
        return Err(parse_err(1, format!("header mismatch: expected `{shown}`")));
    }

    let mut records = Vec::new();
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != dx + dz + 1 {
            return Err(parse_err(
                line,
                format!("expected {} columns, found {}", dx + dz + 1, row.len()),
            ));
        }
        let number = |col: usize| -> Result<f64> {
            let text = &row[col];
            let v: f64 = text
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("column {}: `{text}` is not a number", expected[col])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {}: non-finite value `{text}`", expected[col])));
            }
            Ok(v)
        };
        let features = (0..dx).map(number).collect::<Result<Vec<_>>>()?;
        let label = row[dx]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("label `{}` is not a class id", &row[dx])))?;
        let protected = (dx + 1..dx + 1 + dz).map(number).collect::<Result<Vec<_>>>()?;
        if let Some(p) = protected.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(parse_err(line, format!("z{p} = {} lies outside [0, 1]", protected[p])));
        }
        records.push(Record {
            features,
            label,
            protected,
        });
    }
    if records.is_empty() {
        return Err(parse_err(2, "no records after the header".into()));
    }
    Ok(records)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes `train.csv` and `test.csv` into `dir`, creating it if needed.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_csv(&data.train, &dir.join(TRAIN_FILE))?;
    save_csv(&data.test, &dir.join(TEST_FILE))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let train = load_csv(&dir.join(TRAIN_FILE))?;
    let test = load_csv(&dir.join(TEST_FILE))?;
    let dims = |r: &Record| (r.features.len(), r.protected.len());
    if let (Some(a), Some(b)) = (train.first(), test.first()) {
        if dims(a) != dims(b) {
            return Err(Error::Invalid("train and test files have different columns".into()));
        }
    }
    Ok(Dataset { train, test })
}
