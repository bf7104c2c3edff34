use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use farecontrast::data::{generate_synthetic, load_dataset, save_dataset};
use farecontrast::harness::bench::{bench, cclk_fare_ratios, check_ratio_trend, save_bench_csv};
use farecontrast::harness::train::evaluate_model;
use farecontrast::harness::verify::{self, VerifyOptions};
use farecontrast::harness::{train_with_sink, ExperimentConfig, HistoryWriter, ModelParams};

#[derive(Parser)]
#[command(name = "farecontrast", version, about = "Fairness-aware contrastive learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train.csv and test.csv from the `synth` section.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder; writes model.json, history.csv and metrics.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on a dataset directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional config whose `train.probe` section sets the probe.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run oracle and invariant suites; exits nonzero on any failure.
    Verify {
        #[arg(long)]
        suite: Option<String>,
        /// Feed protected rows to attention without unit normalization.
        #[arg(long)]
        no_normalize: bool,
        /// Perturb the analytic gradient of this parameter (checker self-test).
        #[arg(long)]
        perturb_gradient: Option<String>,
        #[arg(long, default_value_t = 1e-2)]
        perturb_delta: f64,
    },
    /// Time FARE, SparseFARE and CCLK conditioning across batch sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = generate_synthetic(&cfg.synth)?;
            save_dataset(&data, &out).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} train and {} test records to {}",
                data.train.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dataset = load_dataset(&data)?;
            std::fs::create_dir_all(&out)?;
            let mut history = HistoryWriter::create(&out.join("history.csv"))?;
            let run = train_with_sink(&cfg.train, &dataset, &mut |row| {
                println!("epoch {:>3}  loss {:.6}  lr {:.3e}  {:.2}s", row.epoch, row.loss, row.lr, row.seconds);
                history.append(row)
            })?;
            run.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&run.metrics)?);
        }
        Command::Eval {
            model,
            data,
            out,
            config,
        } => {
            let probe = match config {
                Some(c) => ExperimentConfig::load(&c)?.train.probe,
                None => Default::default(),
            };
            let model = ModelParams::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let report = evaluate_model(&model, &load_dataset(&data)?, &probe)?;
            let text = serde_json::to_string_pretty(&report)?;
            std::fs::write(&out, &text)?;
            println!("{text}");
        }
        Command::Verify {
            suite,
            no_normalize,
            perturb_gradient,
            perturb_delta,
        } => {
            let opts = VerifyOptions {
                normalize_protected: !no_normalize,
                perturb_gradient: perturb_gradient.map(|n| (n, perturb_delta)),
                ..VerifyOptions::default()
            };
            let reports = verify::run(suite.as_deref(), &opts)?;
            for r in &reports {
                println!("{r}");
            }
            if reports.iter().any(|r| r.failed()) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Bench {
            sizes,
            reps,
            out,
            seed,
        } => {
            let rows = bench(&sizes, reps, seed)?;
            save_bench_csv(&rows, &out)?;
            for r in &rows {
                println!("{:<12} b={:<6} {:.6e}s", r.mechanism, r.batch_size, r.median_seconds);
            }
            for (b, ratio) in cclk_fare_ratios(&rows) {
                println!("cclk/fare at b={b}: {ratio:.2}");
            }
            if let Err(e) = check_ratio_trend(&rows) {
                eprintln!("{e}");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
