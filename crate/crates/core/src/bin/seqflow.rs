//! Command-line entry point: data generation, training, evaluation,
//! correlation analysis, sampling, gradient checking and generalization-gap
//! reports, all driven by JSON configs and CSV datasets.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqflow::data::{self, KinematicConfig};
use seqflow::error::Result;
use seqflow::metrics::Unit;
use seqflow::train::{self, checkpoint_load, load_config};

#[derive(Parser)]
#[command(name = "seqflow", about = "Autoregressive flows and sequential latent variable models for time series", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as CSV
    GenData {
        /// kinematic | ar | two-regime
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        /// sequence length
        #[arg(long = "T", default_value_t = 100)]
        t: usize,
        /// number of sequences
        #[arg(long = "N", default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// observation dimensionality (kinematic)
        #[arg(long = "D", default_value_t = 2)]
        d: usize,
        /// acceleration noise standard deviation (kinematic)
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        /// AR coefficients, comma separated (ar)
        #[arg(long, default_value = "0.95", value_delimiter = ',')]
        rho: Vec<f64>,
        /// innovation noise scale (ar)
        #[arg(long, default_value_t = 0.3)]
        noise_std: f64,
        /// per-regime mean shifts, comma separated (two-regime)
        #[arg(long, default_value = "0.0,3.0", value_delimiter = ',')]
        shifts: Vec<f64>,
        /// per-regime scales, comma separated (two-regime)
        #[arg(long, default_value = "1.0,0.5", value_delimiter = ',')]
        scales: Vec<f64>,
    },
    /// Train a model from a JSON config
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Report per-sequence NLL (or its bound) on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// per-dim | per-step
        #[arg(long, default_value = "per-step")]
        unit: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lag-1 correlation of a dataset and of each flow stage
    AnalyzeCorr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw sequences from a trained model
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "T")]
        t: usize,
        #[arg(long = "N")]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against finite differences; exits nonzero
    /// on failure
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
    },
    /// Train/test NLL gap with histograms
    Gap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json<T: serde::Serialize>(value: &T, path: &PathBuf) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            kind,
            out,
            t,
            n,
            seed,
            d,
            sigma,
            rho,
            noise_std,
            shifts,
            scales,
        } => {
            let batch = match kind.as_str() {
                "kinematic" => {
                    let mut cov = seqflow::array::DenseArray::zeros(vec![d, d]);
                    for i in 0..d {
                        cov.set(i, i, sigma * sigma);
                    }
                    let cfg = KinematicConfig {
                        sigma: cov,
                        t,
                        n,
                        seed,
                    };
                    data::gen_kinematic(&cfg)?.0
                }
                "ar" => data::gen_ar(&rho, noise_std, t, n, seed)?,
                "two-regime" => {
                    if shifts.len() != 2 || scales.len() != 2 {
                        return Err(seqflow::error::Error::contract(
                            "two-regime expects exactly two shifts and two scales",
                        ));
                    }
                    data::gen_two_regime(
                        n,
                        (shifts[0], shifts[1]),
                        (scales[0], scales[1]),
                        seed,
                    )?
                }
                other => {
                    return Err(seqflow::error::Error::contract(format!(
                        "unknown data kind `{other}`; expected kinematic, ar or two-regime"
                    )))
                }
            };
            data::save_csv(&batch, &out)?;
            println!(
                "wrote {} sequences x {} steps x {} dims to {}",
                batch.num_sequences(),
                batch.num_steps(),
                batch.dim(),
                out.display()
            );
        }
        Command::Train { config, out_dir } => {
            let cfg = load_config(&config)?;
            let (_, outcome) = train::train(&cfg, &out_dir)?;
            println!("checkpoint: {}", outcome.checkpoint_path);
            println!("log: {}", outcome.log_path);
            if let Some(obj) = outcome.final_objective {
                println!("final objective ({}): {obj:.6}", cfg.unit.label());
            }
        }
        Command::Eval {
            checkpoint,
            data: data_path,
            unit,
            out,
        } => {
            let ckpt = checkpoint_load(&checkpoint)?;
            let raw = data::load_csv(&data_path)?;
            let unit = Unit::parse(&unit)?;
            let report = train::evaluate(&ckpt, &raw, unit)?;
            write_json(&report, &out)?;
            let label = if report.bound { "NLL bound" } else { "NLL" };
            println!(
                "{} ({}, {}): {:.6}",
                label,
                report.model,
                unit.label(),
                report.mean
            );
        }
        Command::AnalyzeCorr {
            data: data_path,
            checkpoint,
            out,
        } => {
            let raw = data::load_csv(&data_path)?;
            let ckpt = match checkpoint {
                Some(p) => Some(checkpoint_load(&p)?),
                None => None,
            };
            let report = train::analyze_corr(&raw, ckpt.as_ref())?;
            write_json(&report, &out)?;
            println!("corr(x): {:.6}", report.corr_x.corr);
            for (i, stage) in report.corr_stages.iter().enumerate() {
                println!("corr(stage {}): {:.6}", i + 1, stage.corr);
            }
        }
        Command::Sample {
            checkpoint,
            t,
            n,
            seed,
            out,
        } => {
            let ckpt = checkpoint_load(&checkpoint)?;
            let batch = train::sample(&ckpt, t, n, seed)?;
            data::save_csv(&batch, &out)?;
            println!(
                "sampled {} sequences x {} steps to {}",
                n,
                t,
                out.display()
            );
        }
        Command::Gradcheck { config, threshold } => {
            let cfg = load_config(&config)?;
            let report = train::gradcheck(&cfg, threshold)?;
            for (name, err) in &report.per_param {
                println!("{name}: rel error {err:.3e}");
            }
            if report.pass {
                println!(
                    "PASS: max rel error {:.3e} < {:.1e}",
                    report.max_rel_error, report.threshold
                );
            } else {
                println!(
                    "FAIL: max rel error {:.3e} >= {:.1e}",
                    report.max_rel_error, report.threshold
                );
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Gap {
            checkpoint,
            train: train_path,
            test: test_path,
            out,
        } => {
            let ckpt = checkpoint_load(&checkpoint)?;
            let train_data = data::load_csv(&train_path)?;
            let test_data = data::load_csv(&test_path)?;
            let report = train::gap(&ckpt, &train_data, &test_data)?;
            write_json(&report, &out)?;
            println!(
                "train {:.6}, test {:.6}, gap {:.6}",
                report.train_mean, report.test_mean, report.gap
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
