use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use demun::data::Split;
use demun::experiment::{
    self, evaluate_checkpoint, merge_curves, run_grid, snr_table, ExperimentConfig, GridSpec, CHECKPOINT_FILE,
    CONFIG_FILE, OUT_ENV, PAPER_RATES, SNR_SIGMAS,
};

/// Train and evaluate unrolled reconstruction networks from TOML configs.
#[derive(Parser)]
#[command(name = "demun", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config, then evaluate it on the test split.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to `output.dir`, then $DEMUN_OUT/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Run every cell of a grid file and write `table.csv`.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// Grid directory; defaults to $DEMUN_OUT/<grid file stem>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Merge per-projection curves of finished runs into one long CSV.
    Curves {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a stored checkpoint.
    Eval {
        /// Run directory holding `config.toml` and `checkpoint.bin`.
        run: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Directory for the per-image and curve CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Input SNR (dB) per sampling rate, matrix kind and noise level.
    Snr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a corpus of generated grayscale scenes as PNGs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 223)]
        images: usize,
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            seed_override,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed_override {
                cfg.train.seed = seed;
            }
            let dir = out.unwrap_or_else(|| cfg.output_dir());
            let summary = experiment::run(&cfg, &dir)?;
            println!(
                "{}: test PSNR {:.3} dB (adjoint {:.3} dB), best epoch {}",
                dir.display(),
                summary.mean_psnr,
                summary.adjoint_psnr,
                summary.best_epoch
            );
            if let Some(reason) = summary.aborted {
                log::warn!("training stopped early: {reason}");
            }
        }
        Command::Grid {
            config,
            out,
            jobs,
            seed_override,
        } => {
            let mut grid = GridSpec::load(&config)?;
            if let Some(seed) = seed_override {
                grid.override_seed(seed)?;
            }
            let dir = out.unwrap_or_else(|| {
                let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                root.join(config.file_stem().unwrap_or_default())
            });
            let rows = run_grid(&grid, &dir, jobs)?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!("{}: {} cells, {failed} failed", dir.join("table.csv").display(), rows.len());
        }
        Command::Curves { runs, out } => emit(out.as_deref(), &merge_curves(&runs)?)?,
        Command::Eval {
            run,
            config,
            checkpoint,
            split,
            out,
        } => {
            let pick = |given: Option<PathBuf>, file: &str| match (given, &run) {
                (Some(p), _) => Ok(p),
                (None, Some(r)) => Ok(r.join(file)),
                (None, None) => bail!("pass a run directory or --{}", file.split('.').next().unwrap()),
            };
            let cfg = ExperimentConfig::load(&pick(config, CONFIG_FILE)?)?;
            let report = evaluate_checkpoint(&cfg, &pick(checkpoint, CHECKPOINT_FILE)?, split)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                report.write_csvs(&dir.join(experiment::PER_IMAGE_FILE), &dir.join(experiment::CURVE_FILE))?;
            }
            println!("{split} PSNR {:.3} dB over {} tiles", report.mean_psnr, report.per_image.len());
            for (i, p) in report.curve.iter().enumerate() {
                println!("  after projection {}: {p:.3} dB", i + 1);
            }
        }
        Command::Snr { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            emit(out.as_deref(), &snr_table(&cfg, &PAPER_RATES, &SNR_SIGMAS)?)?;
        }
        Command::Synth {
            out,
            images,
            size,
            seed,
        } => {
            demun::synth::write_corpus(&out, images, size, seed)?;
            println!("wrote {images} scenes of {size}x{size} to {}", out.display());
        }
    }
    Ok(())
}
