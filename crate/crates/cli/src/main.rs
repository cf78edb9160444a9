//! `dynbits` — calibrate, profile, simulate, replay and report on the
//! dynamic-precision dispatch pipeline. Every command is a pure function of
//! its flags and input files: rerunning with identical inputs produces
//! byte-identical output files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dynbits::calibration::{derive_thresholds, CalibrationOptions};
use dynbits::env::EnvConfig;
use dynbits::harness::report::{load_run, render_text, summarize_runs, write_report};
use dynbits::harness::{
    collect_calibration, jsonl, replay_dispatch, simulate_run, SimMode,
};
use dynbits::kinematics::{Action, KinematicsConfig};
use dynbits::profiler::{profile, proxy_correlation};
use dynbits::quant::BitWidth;
use dynbits::CalibrationTable;

#[derive(Parser)]
#[command(name = "dynbits", version, about = "Dynamic-precision dispatch harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct EnvArg {
    /// Environment config document (JSON); defaults are used when omitted.
    #[arg(long = "env-config", value_name = "FILE")]
    env_config: Option<PathBuf>,
}

impl EnvArg {
    fn load(&self) -> Result<EnvConfig> {
        let cfg = match &self.env_config {
            None => EnvConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading env config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing env config {}", path.display()))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Collect full-precision calibration trajectories and derive the
    /// sensitivity thresholds.
    Calibrate {
        /// Number of calibration seeds (0..N).
        #[arg(long)]
        seeds: u64,
        /// Output table document.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Terminal accuracy budget D_acc (task length units).
        #[arg(long = "d-acc", default_value_t = 1.0)]
        d_acc: f64,
        /// Error bound regularizer.
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        /// Number of uniform sensitivity bins.
        #[arg(long, default_value_t = 32)]
        bins: usize,
        /// Coverage warning threshold per bin.
        #[arg(long = "min-per-bin", default_value_t = 50)]
        min_per_bin: usize,
        /// Full-precision bypass threshold.
        #[arg(long = "theta-fp", default_value_t = 0.5)]
        theta_fp: f64,
        /// Convex weight of the macro window mean.
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        /// Hysteresis delay window.
        #[arg(long, default_value_t = 3)]
        k: u32,
        #[command(flatten)]
        env: EnvArg,
    },
    /// Step-wise perturbation profiling against full-precision baselines.
    Profile {
        /// Number of seeds (0..N).
        #[arg(long)]
        seeds: u64,
        /// Injected bit-width (2, 4 or 8).
        #[arg(long, default_value_t = 2)]
        bits: u8,
        /// Output profile records (JSONL).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        env: EnvArg,
    },
    /// Closed-loop simulation under a precision mode.
    Simulate {
        /// Number of seeds (0..N).
        #[arg(long)]
        seeds: u64,
        /// static:16 | static:8 | static:4 | static:2 | dynamic
        #[arg(long)]
        mode: String,
        /// Calibration table (required for dynamic mode).
        #[arg(long, value_name = "FILE")]
        table: Option<PathBuf>,
        /// Output run file (JSONL).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        env: EnvArg,
    },
    /// Replay a recorded action log through kinematics + dispatcher.
    Dispatch {
        /// Input action log (JSONL, one {xyz, rot, gripper} object per line).
        #[arg(long, value_name = "FILE")]
        log: PathBuf,
        /// Calibration table.
        #[arg(long, value_name = "FILE")]
        table: PathBuf,
        /// Output schedule (JSONL).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Aggregate run files into a report (JSON + CSV series + text table).
    Report {
        /// Run files produced by `simulate`.
        #[arg(long, num_args = 1.., value_name = "FILE")]
        runs: Vec<PathBuf>,
        /// Output report JSON; CSV companions are written next to it.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

fn seed_range(n: u64) -> Vec<u64> {
    (0..n).collect()
}

fn load_table(path: &Path) -> Result<CalibrationTable> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading table {}", path.display()))?;
    let table: CalibrationTable =
        serde_json::from_str(&text).with_context(|| format!("parsing table {}", path.display()))?;
    table.validate()?;
    Ok(table)
}

fn write_table(table: &CalibrationTable, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(table)?;
    std::fs::write(path, text + "\n")
        .with_context(|| format!("writing table {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate {
            seeds,
            out,
            d_acc,
            eta,
            bins,
            min_per_bin,
            theta_fp,
            lambda,
            k,
            env,
        } => {
            let env_cfg = env.load()?;
            let base = CalibrationTable {
                theta_24: theta_fp,
                theta_48: theta_fp,
                theta_fp,
                lambda,
                k,
                d_acc,
                eta,
                ..CalibrationTable::default()
            };
            base.validate()?;
            let (samples, stats) = collect_calibration(&seed_range(seeds), &base, &env_cfg)?;
            let opts = CalibrationOptions { bins, min_per_bin, ..CalibrationOptions::default() };
            let (table, report) = derive_thresholds(&samples, &base, &opts)?;
            for warning in &report.warnings {
                eprintln!("warning: {warning}");
            }
            if !stats.skipped_seeds.is_empty() {
                eprintln!(
                    "warning: skipped {} unsuccessful baseline seed(s): {:?}",
                    stats.skipped_seeds.len(),
                    stats.skipped_seeds
                );
            }
            write_table(&table, &out)?;
            println!(
                "calibrated theta_24 = {}, theta_48 = {} from {} samples ({} seeds retained) -> {}",
                table.theta_24,
                table.theta_48,
                stats.samples,
                stats.baselines_retained,
                out.display()
            );
            Ok(())
        }
        Command::Profile { seeds, bits, out, env } => {
            let env_cfg = env.load()?;
            let Some(bits) = BitWidth::from_bits(bits).filter(|b| *b != BitWidth::Full) else {
                bail!("--bits must be one of 2, 4, 8");
            };
            let kin = KinematicsConfig::default();
            let (records, stats) = profile(&seed_range(seeds), bits, &env_cfg, &kin)?;
            if !stats.skipped_seeds.is_empty() {
                eprintln!(
                    "warning: skipped {} unsuccessful baseline seed(s): {:?}",
                    stats.skipped_seeds.len(),
                    stats.skipped_seeds
                );
            }
            jsonl::write_jsonl(&out, &records)?;
            match proxy_correlation(&records) {
                Ok((r_m, r_j)) => println!(
                    "profiled {} steps ({} excluded): r_M = {r_m:.3}, r_J = {r_j:.3} -> {}",
                    stats.records,
                    stats.excluded_records,
                    out.display()
                ),
                Err(e) => println!(
                    "profiled {} steps ({} excluded): correlation unavailable ({e}) -> {}",
                    stats.records,
                    stats.excluded_records,
                    out.display()
                ),
            }
            Ok(())
        }
        Command::Simulate { seeds, mode, table, out, env } => {
            let env_cfg = env.load()?;
            let mode: SimMode = mode.parse()?;
            let table = match (&table, mode) {
                (Some(path), _) => load_table(path)?,
                (None, SimMode::Dynamic) => {
                    bail!("dynamic mode requires a calibrated table (--table)")
                }
                (None, SimMode::Static(_)) => CalibrationTable::default(),
            };
            let seed_list = seed_range(seeds);
            let run = simulate_run(&seed_list, mode, &table, &env_cfg)?;
            dynbits::harness::report::write_run(&run, seed_list.len(), &table, &out)?;
            let successes = run.episodes.iter().filter(|e| e.success).count();
            println!(
                "{mode}: {successes}/{} successes, mean cost {:.2} -> {}",
                run.episodes.len(),
                run.episodes.iter().map(|e| e.total_cost).sum::<f64>()
                    / run.episodes.len().max(1) as f64,
                out.display()
            );
            Ok(())
        }
        Command::Dispatch { log, table, out } => {
            let table = load_table(&table)?;
            let actions: Vec<(usize, Action)> = jsonl::read_jsonl_numbered(&log)?;
            for (line, action) in &actions {
                action
                    .validate()
                    .with_context(|| format!("{}:{line}: invalid action", log.display()))?;
            }
            let actions: Vec<Action> = actions.into_iter().map(|(_, a)| a).collect();
            let schedule = replay_dispatch(&actions, &table)?;
            jsonl::write_jsonl(&out, &schedule)?;
            println!("dispatched {} steps -> {}", schedule.len(), out.display());
            Ok(())
        }
        Command::Report { runs, out } => {
            if runs.is_empty() {
                bail!("--runs needs at least one run file");
            }
            let data: Vec<_> = runs
                .iter()
                .map(|p| load_run(p))
                .collect::<Result<_, _>>()?;
            let report = summarize_runs(&data);
            write_report(&report, &data, &out)?;
            print!("{}", render_text(&report));
            println!("report -> {}", out.display());
            Ok(())
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "parse";
        }
        if cause.downcast_ref::<dynbits::harness::jsonl::JsonlError>().is_some() {
            return "parse";
        }
    }
    "invalid-input"
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let obj = serde_json::json!({
            "error": format!("{err:#}"),
            "kind": error_kind(&err),
        });
        eprintln!("{obj}");
        std::process::exit(1);
    }
}
