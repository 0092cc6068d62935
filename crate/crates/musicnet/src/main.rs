//! Command-line front end: train a model, evaluate a checkpoint, dump
//! correlation matrices, or materialize a synthetic dataset to CSV.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use musicnet::config::RunConfig;
use musicnet::{data, train, Error, Result};

#[derive(Parser)]
#[command(name = "musicnet", version, about = "Multi-scale representation learning for irregularly sampled multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss trace, report, and
    /// correlation dumps.
    Train(CommonArgs),
    /// Evaluate an existing checkpoint on the config's held-out split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint produced by `train` (defaults to <out>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Estimate both correlation matrices on the training split and write
    /// them as CSV.
    CorrDump(CommonArgs),
    /// Generate the config's synthetic dataset and write observations (and
    /// labels) as CSV.
    Synth(CommonArgs),
}

fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let config = load_config(&args)?;
            let report = train::train(&config, &args.out)?;
            let last = report.losses.last();
            println!(
                "trained {} epochs; final total loss {}",
                report.epochs_run,
                last.map(|r| r.total.to_string()).unwrap_or_else(|| "n/a".to_string())
            );
            for w in &report.warnings {
                eprintln!("warning: {}", w);
            }
            println!("artifacts in {}: {}", args.out.display(), report.artifacts.join(", "));
            Ok(())
        }
        Command::Eval { common, checkpoint } => {
            let config = load_config(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| common.out.join("checkpoint.bin"));
            let report = train::eval_checkpoint(&config, &ckpt, &common.out)?;
            if let Some(m) = &report.classification {
                println!(
                    "classification: accuracy {:.4}, auroc {}",
                    m.accuracy,
                    m.auroc.map(|a| format!("{:.4}", a)).unwrap_or_else(|| "n/a".to_string())
                );
            }
            if let Some(i) = &report.interpolation {
                println!("interpolation: mse {:.6} (baseline {:.6})", i.mse, i.baseline_mse);
            }
            if let Some(f) = &report.forecast {
                println!("forecast: mse {:.6} (baseline {:.6})", f.mse, f.baseline_mse);
            }
            for w in &report.warnings {
                eprintln!("warning: {}", w);
            }
            println!("report written to {}", common.out.join("report.json").display());
            Ok(())
        }
        Command::CorrDump(args) => {
            let config = load_config(&args)?;
            let files = train::corr_dump(&config, &args.out)?;
            println!("wrote {} to {}", files.join(", "), args.out.display());
            Ok(())
        }
        Command::Synth(args) => {
            let config = load_config(&args)?;
            config.validate()?;
            let spec = config.generator.as_ref().ok_or_else(|| {
                Error::config("synth requires a [generator] section in the config")
            })?;
            let dataset = data::synth_generate(spec, config.seed)?;
            std::fs::create_dir_all(&args.out)
                .map_err(|e| Error::config(format!("cannot create {:?}: {}", args.out, e)))?;
            let obs = args.out.join("observations.csv");
            data::write_csv(&dataset, &obs)?;
            let mut written = vec!["observations.csv".to_string()];
            if dataset.instances.iter().all(|i| i.label.is_some()) {
                data::write_labels(&dataset, &args.out.join("labels.csv"))?;
                written.push("labels.csv".to_string());
            }
            println!(
                "wrote {} instances ({} channels) to {}: {}",
                dataset.len(),
                dataset.num_channels,
                args.out.display(),
                written.join(", ")
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
