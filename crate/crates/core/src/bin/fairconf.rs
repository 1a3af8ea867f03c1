use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairconf::pipeline::{self, PipelineConfig, SamplerSetting, Unsampled};
use fairconf::Result;

#[derive(Parser, Debug)]
#[command(name = "fairconf", version)]
#[command(about = "Train an embedding classifier, build conformal prediction sets and audit them by subgroup")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Pipeline config (TOML)
    #[arg(long)]
    config: PathBuf,

    /// Override the top-level seed
    #[arg(long)]
    seed: Option<u64>,

    /// Override the miscoverage level
    #[arg(long)]
    alpha: Option<f64>,

    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into the output directory
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the classification head
    Train {
        #[command(flatten)]
        common: Common,

        /// Train on shuffled epochs without the dynamic sampler
        #[arg(long)]
        unsampled: bool,
    },
    /// Calibrate, build prediction sets for the test split and write the fairness report
    Audit {
        #[command(flatten)]
        common: Common,

        /// Checkpoint to audit (default: model.ckpt in the output directory)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rebuild the fairness report from an existing prediction-set file
    Report {
        #[command(flatten)]
        common: Common,

        /// Prediction sets (default: prediction_sets.jsonl in the output directory)
        #[arg(long)]
        sets: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(a) = common.alpha {
        cfg.alpha = a;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = load(&common)?;
            let m = pipeline::run_synth(&cfg)?;
            println!(
                "wrote {} samples to {} (synth seed {})",
                m.n_samples,
                cfg.output_dir.display(),
                m.synth_seed
            );
        }
        Command::Train { common, unsampled } => {
            let mut cfg = load(&common)?;
            if unsampled {
                cfg.sampler = SamplerSetting::Unsampled(Unsampled::Unsampled);
            }
            let t = pipeline::run_train(&cfg)?;
            let last = t.history.epoch_loss.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} epochs on {} samples; final loss {last:.4}",
                t.history.epoch_loss.len(),
                t.split.train.len()
            );
        }
        Command::Audit { common, checkpoint } => {
            let cfg = load(&common)?;
            let a = pipeline::run_audit(&cfg, checkpoint.as_deref())?;
            let s = &a.summary;
            println!("alpha {}  n_calibration {}  n_test {}", s.alpha, s.n_calibration, s.n_test);
            println!("empirical coverage {:.4}", s.empirical_coverage);
            println!("guaranteed band [{:.4}, {:.4}]", s.coverage_band.0, s.coverage_band.1);
            println!("mean set size {:.3}", s.mean_set_size);
        }
        Command::Report { common, sets } => {
            let cfg = load(&common)?;
            let r = pipeline::run_report(&cfg, sets.as_deref())?;
            println!(
                "report for {} sets written to {}",
                r.n_sets,
                cfg.output_dir.join(pipeline::REPORT_DIR).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fairconf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
