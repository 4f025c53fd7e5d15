use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use duet_cli::bench::{self, BenchOptions};
use duet_cli::config::{resolve_output, RunConfig, UsageError, PRESETS};
use duet_cli::verify::{self, Precision, VerifyOptions};
use duet_cli::{eval, sample, train};

#[derive(Parser)]
#[command(name = "duet", version, about = "Two-person motion diffusion with selective state-space blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser on the toy interaction set.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in starting point, applied before the file.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        preset: Option<String>,
        /// Dotted `key=value` override, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from the training state in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Draw guided DDIM samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        label: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Time scans, attention and both denoisers across sequence lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_LENGTHS)]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 9)]
        repeats: usize,
        /// Also time the micro rows on this many threads.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Longest sequence for the full-denoiser rows.
        #[arg(long, default_value_t = bench::DEFAULT_DENOISER_MAX_LEN)]
        denoiser_max_len: usize,
        /// Write the report as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Score samples of a checkpoint against its training set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        preset: Option<String>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Samples per label.
        #[arg(long, default_value_t = eval::DEFAULT_SAMPLES)]
        samples: usize,
    },
    /// Run the oracle suite.
    Verify {
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
        #[arg(long, hide = true)]
        corrupt_scan: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train { config, preset, overrides, resume } => {
            let cfg = RunConfig::load(preset.as_deref(), config.as_deref(), &overrides)?;
            let out = train::train(&cfg, resume)?;
            println!(
                "trained {} epochs ({} steps) into {}; final total loss {:.5}",
                out.epochs_run,
                out.steps,
                out.output_dir.display(),
                out.last_epoch.get("total").copied().unwrap_or(f64::NAN)
            );
            Ok(true)
        }
        Command::Sample { ckpt, label, seed, count, out } => {
            let out = resolve_output(&out);
            for w in sample::run(&ckpt, label, seed, count, &out)? {
                println!("{} ({:.3}s)", w.motion.display(), w.elapsed.as_secs_f64());
            }
            Ok(true)
        }
        Command::Bench { lengths, width, repeats, threads, denoiser_max_len, json } => {
            let report = bench::run(&BenchOptions { lengths, width, repeats, threads, denoiser_max_len, seed: 0 })?;
            print!("{}", report.summary());
            if let Some(path) = json {
                duet::checkpoint::atomic_write(&resolve_output(&path), serde_json::to_string_pretty(&report)?.as_bytes())?;
            }
            Ok(true)
        }
        Command::Eval { ckpt, config, preset, overrides, seed, samples } => {
            let cfg = RunConfig::load(preset.as_deref(), config.as_deref(), &overrides)?;
            let r = eval::overfit_report(&cfg, &ckpt, seed, samples)?;
            for l in &r.labels {
                println!("label {}: trained {:.5}, untrained {:.5}", l.label, l.trained, l.untrained);
            }
            println!("mean position mse: trained {:.5}, untrained {:.5}, ratio {:.3}", r.trained, r.untrained, r.ratio());
            Ok(true)
        }
        Command::Verify { precision, corrupt_scan } => {
            let opts = VerifyOptions { precision, corrupt_scan };
            let results = verify::run(&opts)?;
            for r in &results {
                println!("{r}");
            }
            match results.iter().find(|r| !r.passed()) {
                Some(first) => {
                    eprintln!("verify failed: {}", first.name);
                    Ok(false)
                }
                None => Ok(true),
            }
        }
    }
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.downcast_ref::<UsageError>().is_some()
        || matches!(err.downcast_ref::<duet::Error>(), Some(duet::Error::Usage(_) | duet::Error::Config(_)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
