use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use btc_anomaly::synth::generate;
use btc_anomaly::EntityKind;
use btc_anomaly_cli::config::{synth_config, PipelineConfig};
use btc_anomaly_cli::pipeline::{eval_rankings, write_synth};
use btc_anomaly_cli::run_pipeline;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "btc-anomaly", version, about = "Anomaly detection on transaction ledgers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated: user, tx.
        #[arg(long)]
        graphs: Option<String>,
        /// Comma-separated: gaussian, ocsvm.
        #[arg(long)]
        detectors: Option<String>,
        /// One value, or several to sweep.
        #[arg(long)]
        nu: Option<String>,
        /// A positive number or `auto`.
        #[arg(long)]
        gamma: Option<String>,
        /// A fixed k or a range `lo..hi`.
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        sample_limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic ledger with planted anomalies.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count known anomalies near the top of ranking files.
    Eval {
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        rankings: Vec<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        /// Ranks to inspect; defaults to the leading 1%.
        #[arg(long)]
        top: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    User,
    Tx,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            graphs,
            detectors,
            nu,
            gamma,
            k,
            sample_limit,
            out,
        } => {
            let mut cfg = PipelineConfig::from_file(&config)?;
            let overrides = [
                ("seed", seed.map(|v| v.to_string())),
                ("graphs", graphs),
                ("detectors", detectors),
                ("nu", nu),
                ("gamma", gamma),
                ("k", k),
                ("sample_limit", sample_limit.map(|v| v.to_string())),
                ("out", out.map(|p| p.display().to_string())),
            ];
            for (key, value) in overrides {
                if let Some(v) = value {
                    cfg.set(key, &v).with_context(|| format!("--{}", key.replace('_', "-")))?;
                }
            }
            let report = run_pipeline(&cfg)?;
            for f in &report.files {
                println!("{}", report.out.join(f).display());
            }
        }
        Command::Synth { config, out } => {
            let cfg = synth_config(&config)?;
            let ledger = generate(&cfg)?;
            for p in write_synth(&out, &ledger)? {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            rankings,
            truth,
            kind,
            top,
        } => {
            let kind = kind.map(|k| match k {
                Kind::User => EntityKind::User,
                Kind::Tx => EntityKind::Tx,
            });
            let reports = eval_rankings(&rankings, &truth, kind, top, 0.01)?;
            let json: Vec<_> = reports
                .iter()
                .map(|(p, r)| serde_json::json!({ "ranking": p.display().to_string(), "report": r }))
                .collect();
            println!("{}", serde_json::to_string_pretty(&json)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
