//! Command-line entry point. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::ExperimentConfig;
use super::run::{self, Cell};
use super::{selftest, HarnessError, ImageOutcome, Result};
use crate::datasets;
use crate::diffusion::Checkpoint;
use crate::metrics::MetricReport;

#[derive(Debug, Parser)]
#[command(name = "genofdma", about = "Generative OFDMA image transmission experiments", version)]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the denoiser on toy images and write the checkpoint.
    Train,
    /// Run a single cell of the grid.
    Simulate {
        /// Transmitted fraction N/M (default: first grid value).
        #[arg(long)]
        ratio: Option<f64>,
        /// Channel SNR in dB, or `inf` (default: first grid value).
        #[arg(long)]
        snr: Option<f64>,
        /// Print the effective config as TOML and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run the full ratio × SNR grid.
    Sweep,
    /// Score two PGM images.
    Metrics { reference: PathBuf, test: PathBuf },
    /// Run the built-in invariant checks.
    Selftest,
}

/// Parses `argv` (including the program name), runs the command, and returns
/// the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn wr(out: &mut dyn Write, text: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(text).map_err(|e| HarnessError::io(Path::new("<stdout>"), e))
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Selftest => {
            let mut failed = 0;
            for (name, r) in selftest::run_all() {
                match r {
                    Ok(()) => wr(out, format_args!("ok   {name}\n"))?,
                    Err(msg) => {
                        failed += 1;
                        wr(out, format_args!("FAIL {name}: {msg}\n"))?;
                    }
                }
            }
            Ok(if failed == 0 { 0 } else { 2 })
        }
        Command::Metrics { reference, test } => {
            let a = datasets::load_pgm(reference)?;
            let b = datasets::load_pgm(test)?;
            if a.shape != b.shape {
                return Err(HarnessError::Config("images differ in size".into()));
            }
            let m = MetricReport::compare(&a.values, &b.values, a.shape)?;
            wr(out, format_args!("mse={}\npsnr_db={}\nssim={}\n", m.mse, m.psnr_db, m.ssim))?;
            Ok(0)
        }
        Command::Train => {
            let cfg = load_config(&cli)?;
            let schedule = cfg.schedule()?;
            let every = (cfg.train_steps / 20).max(1);
            let state = run::train_model(&cfg, |s| {
                if s.step % every == 0 {
                    let _ = writeln!(err, "step {:>6}  loss {:.4}", s.step, s.running_loss);
                }
            })?;
            let path = cfg.checkpoint_path();
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
            }
            Checkpoint::new(state.final_model(), &schedule, cfg.seed).save(&path)?;
            wr(
                out,
                format_args!(
                    "trained {} steps, loss {:.4} -> {:.4}, checkpoint {}\n",
                    state.step,
                    state.initial_loss,
                    state.running_loss,
                    path.display()
                ),
            )?;
            Ok(0)
        }
        Command::Simulate { ratio, snr, print_config } => {
            let mut cfg = load_config(&cli)?;
            if let Some(r) = ratio {
                cfg.ratios = vec![*r];
            }
            if let Some(s) = snr {
                cfg.snrs_db = vec![*s];
            }
            cfg.ratios.truncate(1);
            cfg.snrs_db.truncate(1);
            cfg.validate()?;
            if *print_config {
                wr(out, format_args!("{}", cfg.to_toml()))?;
                return Ok(0);
            }
            if cfg.ratios.is_empty() || cfg.snrs_db.is_empty() {
                return Err(HarnessError::Config("simulate needs one ratio and one SNR".into()));
            }
            sweep_and_report(&cfg, out)
        }
        Command::Sweep => {
            let cfg = load_config(&cli)?;
            sweep_and_report(&cfg, out)
        }
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn summarize(cell: &Cell, outcomes: &[&ImageOutcome]) -> String {
    let failed = outcomes.iter().filter(|o| !o.record.is_ok()).count();
    format!(
        "cell {:>3}  N/M={:<5} snr={:<5}  ssim {:.4} (zero-filled {:.4})  psnr {:.2} dB (zero-filled {:.2})  ber {:.4}{}\n",
        cell.index,
        cell.ratio,
        cell.snr_db,
        mean(outcomes.iter().map(|o| o.record.ssim)),
        mean(outcomes.iter().map(|o| o.record.baseline_ssim)),
        mean(outcomes.iter().map(|o| o.record.psnr_db)),
        mean(outcomes.iter().map(|o| o.record.baseline_psnr_db)),
        mean(outcomes.iter().map(|o| o.record.ber)),
        if failed > 0 { format!("  ({failed} failed)") } else { String::new() }
    )
}

fn sweep_and_report(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<i32> {
    let (model, schedule) = run::load_model(cfg)?;
    let images = run::test_images(cfg)?;
    let output = run::sweep(cfg, &model, &schedule, &images)?;
    let csv = run::write_outputs(cfg, &output, &cfg.out_dir)?;
    for cell in &output.cells {
        let rows: Vec<&ImageOutcome> = output.outcomes.iter().filter(|o| o.record.cell == cell.index).collect();
        wr(out, format_args!("{}", summarize(cell, &rows)))?;
    }
    wr(out, format_args!("wrote {}\n", csv.display()))?;
    Ok(0)
}
