//! Aggregation of run files into a machine-readable report, an aligned text
//! table, and CSV series for external plotting.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::jsonl::{write_jsonl, JsonlError};
use super::{BitsHistogram, EpisodeSummary, RunLine, TrajectoryRecord};
use crate::dispatcher::CalibrationTable;

/// A run file parsed back into memory.
#[derive(Debug, Clone)]
pub struct RunData {
    pub path: String,
    pub mode: String,
    pub table: CalibrationTable,
    pub episodes: Vec<EpisodeSummary>,
    pub steps: Vec<(u64, TrajectoryRecord)>,
}

pub fn load_run(path: &Path) -> Result<RunData, JsonlError> {
    let lines: Vec<RunLine> = super::jsonl::read_jsonl(path)?;
    let mut data = RunData {
        path: path.display().to_string(),
        mode: String::new(),
        table: CalibrationTable::default(),
        episodes: Vec::new(),
        steps: Vec::new(),
    };
    for line in lines {
        match line {
            RunLine::Meta { mode, table, .. } => {
                data.mode = mode;
                data.table = table;
            }
            RunLine::Step { seed, record } => data.steps.push((seed, record)),
            RunLine::Episode { summary } => data.episodes.push(summary),
        }
    }
    Ok(data)
}

/// One row of the cross-run report.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub mode: String,
    pub theta_fp: f64,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_cost: f64,
    pub mean_steps: f64,
    pub speedup: Option<f64>,
    pub bits_fraction: BitsHistogram,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    /// Mode string the speedups are relative to, when present.
    pub baseline: Option<String>,
}

pub fn summarize_runs(runs: &[RunData]) -> Report {
    let mean_cost = |r: &RunData| {
        r.episodes.iter().map(|e| e.total_cost).sum::<f64>() / r.episodes.len().max(1) as f64
    };
    let baseline = runs.iter().find(|r| r.mode == "static:16");
    let baseline_cost = baseline.map(mean_cost);
    let rows = runs
        .iter()
        .map(|r| {
            let n = r.episodes.len().max(1) as f64;
            let successes = r.episodes.iter().filter(|e| e.success).count() as f64;
            RunSummary {
                run: r.path.clone(),
                mode: r.mode.clone(),
                theta_fp: r.table.theta_fp,
                episodes: r.episodes.len(),
                success_rate: 100.0 * successes / n,
                mean_cost: mean_cost(r),
                mean_steps: r.episodes.iter().map(|e| e.steps as f64).sum::<f64>() / n,
                speedup: baseline_cost.map(|b| b / mean_cost(r)),
                bits_fraction: BitsHistogram::from_steps(r.steps.iter().map(|(_, s)| &s.bits)),
            }
        })
        .collect();
    Report { runs: rows, baseline: baseline.map(|r| r.mode.clone()) }
}

/// Aligned-column text table.
pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<12} {:>8} {:>9} {:>10} {:>9} {:>8}  {:>5} {:>5} {:>5} {:>5}",
        "mode", "episodes", "SR (%)", "mean cost", "speedup", "theta_fp", "f2", "f4", "f8", "f16"
    )
    .unwrap();
    for row in &report.runs {
        let speedup = row
            .speedup
            .map(|s| format!("{s:.2}x"))
            .unwrap_or_else(|| "-".to_string());
        writeln!(
            out,
            "{:<12} {:>8} {:>9.1} {:>10.2} {:>9} {:>8.2}  {:>5.2} {:>5.2} {:>5.2} {:>5.2}",
            row.mode,
            row.episodes,
            row.success_rate,
            row.mean_cost,
            speedup,
            row.theta_fp,
            row.bits_fraction.b2,
            row.bits_fraction.b4,
            row.bits_fraction.b8,
            row.bits_fraction.b16,
        )
        .unwrap();
    }
    out
}

/// Summary CSV: one row per run. Sweeping theta_fp across runs makes this
/// the success/cost trade-off series directly.
pub fn write_summary_csv(report: &Report, path: &Path) -> std::io::Result<()> {
    let mut out = String::from(
        "run,mode,theta_fp,episodes,success_rate,mean_cost,mean_steps,speedup,frac2,frac4,frac8,frac16\n",
    );
    for row in &report.runs {
        let speedup = row.speedup.map(|s| s.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            row.run,
            row.mode,
            row.theta_fp,
            row.episodes,
            row.success_rate,
            row.mean_cost,
            row.mean_steps,
            speedup,
            row.bits_fraction.b2,
            row.bits_fraction.b4,
            row.bits_fraction.b8,
            row.bits_fraction.b16,
        )
        .unwrap();
    }
    std::fs::write(path, out)
}

/// Per-step series CSV (sensitivity, window means, dispatched bits) for the
/// lowest seed of each run; the per-step view of the trade-off curves.
pub fn write_series_csv(runs: &[RunData], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("run,mode,seed,t,phase,S,M_bar,J_bar,bits,cost\n");
    for run in runs {
        let Some(&(first_seed, _)) = run.steps.first() else { continue };
        for (seed, rec) in run.steps.iter().filter(|(s, _)| *s == first_seed) {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                run.path,
                run.mode,
                seed,
                rec.t,
                rec.phase,
                rec.s,
                rec.m_bar,
                rec.j_bar,
                rec.bits,
                rec.cost
            )
            .unwrap();
        }
    }
    std::fs::write(path, out)
}

/// Write the report JSON next to its CSV companions.
pub fn write_report(report: &Report, runs: &[RunData], out_json: &Path) -> Result<(), JsonlError> {
    let io_err = |source| JsonlError::Io { path: out_json.display().to_string(), source };
    let text = serde_json::to_string_pretty(report).expect("serializable report");
    std::fs::write(out_json, text + "\n").map_err(io_err)?;
    let csv = out_json.with_extension("csv");
    write_summary_csv(report, &csv).map_err(io_err)?;
    let series = series_path(out_json);
    write_series_csv(runs, &series).map_err(io_err)?;
    Ok(())
}

pub fn series_path(out_json: &Path) -> std::path::PathBuf {
    let stem = out_json.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    out_json.with_file_name(format!("{stem}_series.csv"))
}

/// Convenience used by tests and the CLI: write a run file.
pub fn write_run(
    run: &super::SimRun,
    seeds: usize,
    table: &CalibrationTable,
    path: &Path,
) -> Result<(), JsonlError> {
    let lines = super::run_to_lines(run, seeds, table);
    write_jsonl(path, &lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{simulate_run, SimMode};
    use crate::quant::BitWidth;

    #[test]
    fn report_round_trips_through_run_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::env::EnvConfig::default();
        let table = CalibrationTable::default();
        let seeds: Vec<u64> = (0..4).collect();

        let mut paths = Vec::new();
        for mode in [SimMode::Static(BitWidth::Full), SimMode::Dynamic] {
            let run = simulate_run(&seeds, mode, &table, &cfg).unwrap();
            let path = dir.path().join(format!("{mode}.jsonl"));
            write_run(&run, seeds.len(), &table, &path).unwrap();
            paths.push(path);
        }

        let runs: Vec<RunData> = paths.iter().map(|p| load_run(p).unwrap()).collect();
        let report = summarize_runs(&runs);
        assert_eq!(report.runs.len(), 2);
        assert_eq!(report.baseline.as_deref(), Some("static:16"));
        assert_eq!(report.runs[0].speedup, Some(1.0));
        assert!(report.runs[1].speedup.unwrap() > 0.0);

        let out = dir.path().join("report.json");
        write_report(&report, &runs, &out).unwrap();
        assert!(out.exists());
        assert!(out.with_extension("csv").exists());
        assert!(series_path(&out).exists());

        let text = render_text(&report);
        assert!(text.contains("static:16"));
        assert!(text.contains("dynamic"));
    }
}
