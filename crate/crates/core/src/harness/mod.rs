//! Closed-loop orchestration: simulate episodes under static or dynamic
//! precision, account costs, collect calibration data, replay action logs
//! through the dispatcher, and aggregate reports.
//!
//! Causality contract: the decision for step `t` consumes only kinematics
//! derived from actions executed at steps `<= t-1`. The tracker is observed
//! *after* the step, and the dispatcher reads the pre-step tracker state.

pub mod jsonl;
pub mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationSample;
use crate::dispatcher::{step_stateful, target_bits, CalibrationTable, DispatcherState};
use crate::env::{env_step, episode_status, policy_forward, reset, EnvConfig, EnvError, EpisodeResult, Phase};
use crate::kinematics::{Action, KinematicTracker};
use crate::par;
use crate::quant::{action_error, BitWidth};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("dynamic mode requires a calibrated table")]
    MissingTable,
    #[error(transparent)]
    Table(#[from] crate::dispatcher::TableError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("unknown mode '{0}'; expected static:16|static:8|static:4|static:2|dynamic")]
    BadMode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Jsonl(#[from] jsonl::JsonlError),
}

/// Precision policy for a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimMode {
    Static(BitWidth),
    Dynamic,
}

impl std::fmt::Display for SimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimMode::Static(b) => write!(f, "static:{b}"),
            SimMode::Dynamic => write!(f, "dynamic"),
        }
    }
}

impl std::str::FromStr for SimMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynamic" => Ok(SimMode::Dynamic),
            "static:2" => Ok(SimMode::Static(BitWidth::B2)),
            "static:4" => Ok(SimMode::Static(BitWidth::B4)),
            "static:8" => Ok(SimMode::Static(BitWidth::B8)),
            "static:16" => Ok(SimMode::Static(BitWidth::Full)),
            other => Err(HarnessError::BadMode(other.to_string())),
        }
    }
}

/// One logged control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: u32,
    pub action: Action,
    /// Width the policy actually ran at.
    pub bits: BitWidth,
    /// Fused sensitivity the dispatcher saw when deciding this step.
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "M_bar")]
    pub m_bar: f64,
    #[serde(rename = "J_bar")]
    pub j_bar: f64,
    pub cost: f64,
    /// Environment phase the step was decided in.
    pub phase: Phase,
}

/// Simulate one episode. Static modes run their fixed width; dynamic mode
/// runs the full observe -> fuse -> target -> hysteresis pipeline (warmup
/// forces full precision). The tracker runs in every mode so records always
/// carry the sensitivity signals.
pub fn simulate_episode(
    seed: u64,
    mode: SimMode,
    table: &CalibrationTable,
    env_cfg: &EnvConfig,
) -> Result<(EpisodeResult, Vec<TrajectoryRecord>), HarnessError> {
    table.validate()?;
    let mut state = reset(seed, env_cfg);
    let mut tracker = KinematicTracker::new(table.kinematics_config());
    let mut dispatcher = DispatcherState::default();
    let mut records = Vec::new();
    let mut total_cost = 0.0;

    loop {
        let (done, success, deviation) = episode_status(&state, env_cfg);
        if done {
            return Ok((
                EpisodeResult {
                    success,
                    terminal_deviation: deviation,
                    steps: state.step_index,
                    total_cost,
                },
                records,
            ));
        }
        let sens = tracker.state();
        let bits = match mode {
            SimMode::Static(b) => b,
            SimMode::Dynamic => {
                let target = target_bits(sens.s, table, sens.warmup);
                step_stateful(&mut dispatcher, target, table.k)
            }
        };
        let phase = state.phase;
        let action = policy_forward(&state, bits, env_cfg)?;
        state = env_step(&state, &action, env_cfg);
        tracker.observe(&action);

        let cost = table.cost_model.cost(bits);
        total_cost += cost;
        records.push(TrajectoryRecord {
            t: state.step_index - 1,
            action,
            bits,
            s: sens.s,
            m_bar: sens.m_bar,
            j_bar: sens.j_bar,
            cost,
            phase,
        });
    }
}

/// Per-episode summary kept in run files next to the step records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub success: bool,
    pub terminal_deviation: f64,
    pub steps: u32,
    pub total_cost: f64,
}

/// A full simulation run: one mode over many seeds.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub mode: SimMode,
    pub episodes: Vec<EpisodeSummary>,
    pub steps: Vec<(u64, TrajectoryRecord)>,
}

/// Run one mode across seeds (parallel across episodes, seed-ordered output).
pub fn simulate_run(
    seeds: &[u64],
    mode: SimMode,
    table: &CalibrationTable,
    env_cfg: &EnvConfig,
) -> Result<SimRun, HarnessError> {
    table.validate()?;
    let results = par::map(seeds, |&seed| {
        simulate_episode(seed, mode, table, env_cfg).expect("table validated above")
    });
    let mut episodes = Vec::with_capacity(seeds.len());
    let mut steps = Vec::new();
    for (&seed, (result, records)) in seeds.iter().zip(results) {
        episodes.push(EpisodeSummary {
            seed,
            success: result.success,
            terminal_deviation: result.terminal_deviation,
            steps: result.steps,
            total_cost: result.total_cost,
        });
        steps.extend(records.into_iter().map(|r| (seed, r)));
    }
    Ok(SimRun { mode, episodes, steps })
}

/// Aggregates for one mode.
#[derive(Debug, Clone, Serialize)]
pub struct ModeSummary {
    pub mode: String,
    pub episodes: usize,
    /// Percent of episodes that succeeded.
    pub success_rate: f64,
    pub mean_cost: f64,
    pub mean_steps: f64,
    pub mean_terminal_deviation: f64,
    /// `mean_cost(static:16) / mean_cost(self)`, when a static:16 run is present.
    pub speedup: Option<f64>,
    /// Fraction of steps dispatched at each width.
    pub bits_fraction: BitsHistogram,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct BitsHistogram {
    #[serde(rename = "2")]
    pub b2: f64,
    #[serde(rename = "4")]
    pub b4: f64,
    #[serde(rename = "8")]
    pub b8: f64,
    #[serde(rename = "16")]
    pub b16: f64,
}

impl BitsHistogram {
    pub fn from_steps<'a>(bits: impl Iterator<Item = &'a BitWidth>) -> Self {
        let mut counts = [0usize; 4];
        let mut total = 0usize;
        for b in bits {
            let slot = match b {
                BitWidth::B2 => 0,
                BitWidth::B4 => 1,
                BitWidth::B8 => 2,
                BitWidth::Full => 3,
            };
            counts[slot] += 1;
            total += 1;
        }
        if total == 0 {
            return BitsHistogram::default();
        }
        let f = |c: usize| c as f64 / total as f64;
        BitsHistogram { b2: f(counts[0]), b4: f(counts[1]), b8: f(counts[2]), b16: f(counts[3]) }
    }
}

/// Suite report across modes, plus the cost model it was computed under.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub seeds: usize,
    pub cost_model: crate::dispatcher::CostModel,
    pub modes: Vec<ModeSummary>,
}

pub fn summarize_run(run: &SimRun, baseline_mean_cost: Option<f64>) -> ModeSummary {
    let n = run.episodes.len().max(1) as f64;
    let successes = run.episodes.iter().filter(|e| e.success).count() as f64;
    let mean_cost = run.episodes.iter().map(|e| e.total_cost).sum::<f64>() / n;
    let mean_steps = run.episodes.iter().map(|e| e.steps as f64).sum::<f64>() / n;
    let mean_dev = run.episodes.iter().map(|e| e.terminal_deviation).sum::<f64>() / n;
    ModeSummary {
        mode: run.mode.to_string(),
        episodes: run.episodes.len(),
        success_rate: 100.0 * successes / n,
        mean_cost,
        mean_steps,
        mean_terminal_deviation: mean_dev,
        speedup: baseline_mean_cost.map(|b| b / mean_cost),
        bits_fraction: BitsHistogram::from_steps(run.steps.iter().map(|(_, r)| &r.bits)),
    }
}

/// Run several modes over the same seeds and aggregate. Speedups are
/// computed against the static:16 run when one is requested.
pub fn run_suite(
    seeds: &[u64],
    modes: &[SimMode],
    table: &CalibrationTable,
    env_cfg: &EnvConfig,
) -> Result<SuiteReport, HarnessError> {
    let runs: Vec<SimRun> = modes
        .iter()
        .map(|&mode| simulate_run(seeds, mode, table, env_cfg))
        .collect::<Result<_, _>>()?;
    let baseline = runs
        .iter()
        .find(|r| r.mode == SimMode::Static(BitWidth::Full))
        .map(|r| r.episodes.iter().map(|e| e.total_cost).sum::<f64>() / r.episodes.len().max(1) as f64);
    Ok(SuiteReport {
        seeds: seeds.len(),
        cost_model: table.cost_model,
        modes: runs.iter().map(|r| summarize_run(r, baseline)).collect(),
    })
}

/// Bookkeeping from a calibration collection pass.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CollectStats {
    pub seeds_requested: usize,
    pub baselines_retained: usize,
    pub skipped_seeds: Vec<u64>,
    pub samples: usize,
}

/// Collect calibration samples: full-precision episodes, with the policy
/// additionally evaluated (counterfactually) at 2/4/8 bits at every step.
/// The environment always steps with the full-precision action; only
/// successful baselines contribute. One sample per step, carrying the
/// decision-time sensitivity.
pub fn collect_calibration(
    seeds: &[u64],
    table: &CalibrationTable,
    env_cfg: &EnvConfig,
) -> Result<(Vec<CalibrationSample>, CollectStats), HarnessError> {
    table.validate()?;
    let kin = table.kinematics_config();
    let per_seed: Vec<Option<Vec<CalibrationSample>>> = par::map(seeds, |&seed| {
        let mut state = reset(seed, env_cfg);
        let mut tracker = KinematicTracker::new(kin);
        let mut samples = Vec::new();
        loop {
            let (done, success, _) = episode_status(&state, env_cfg);
            if done {
                return success.then_some(samples);
            }
            let sens = tracker.state();
            let exact = policy_forward(&state, BitWidth::Full, env_cfg).expect("not done");
            let err = |bits| {
                let noisy = policy_forward(&state, bits, env_cfg).expect("not done");
                action_error(&noisy, &exact)
            };
            samples.push(CalibrationSample {
                s: sens.s,
                e2: err(BitWidth::B2),
                e4: err(BitWidth::B4),
                e8: err(BitWidth::B8),
            });
            state = env_step(&state, &exact, env_cfg);
            tracker.observe(&exact);
        }
    });

    let mut stats = CollectStats { seeds_requested: seeds.len(), ..CollectStats::default() };
    let mut samples = Vec::new();
    for (&seed, entry) in seeds.iter().zip(per_seed) {
        match entry {
            Some(mut s) => {
                stats.baselines_retained += 1;
                samples.append(&mut s);
            }
            None => stats.skipped_seeds.push(seed),
        }
    }
    stats.samples = samples.len();
    Ok((samples, stats))
}

/// One line of a dispatch schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub t: u32,
    #[serde(rename = "S")]
    pub s: f64,
    pub target: BitWidth,
    pub active: BitWidth,
}

/// Feed a recorded action log through kinematics + dispatcher without any
/// environment; pure function of (log, table).
pub fn replay_dispatch(
    actions: &[Action],
    table: &CalibrationTable,
) -> Result<Vec<ScheduleRecord>, HarnessError> {
    table.validate()?;
    let mut tracker = KinematicTracker::new(table.kinematics_config());
    let mut dispatcher = DispatcherState::default();
    let mut out = Vec::with_capacity(actions.len());
    for (t, action) in actions.iter().enumerate() {
        let sens = tracker.state();
        let target = target_bits(sens.s, table, sens.warmup);
        let active = step_stateful(&mut dispatcher, target, table.k);
        out.push(ScheduleRecord { t: t as u32, s: sens.s, target, active });
        tracker.observe(action);
    }
    Ok(out)
}

/// Tagged line in a run file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunLine {
    Meta {
        mode: String,
        seeds: usize,
        table: CalibrationTable,
    },
    Step {
        seed: u64,
        #[serde(flatten)]
        record: TrajectoryRecord,
    },
    Episode {
        #[serde(flatten)]
        summary: EpisodeSummary,
    },
}

/// Serialize a run to tagged JSONL (meta, then steps and episode summaries
/// in seed order).
pub fn run_to_lines(run: &SimRun, seeds: usize, table: &CalibrationTable) -> Vec<RunLine> {
    let mut lines = Vec::with_capacity(1 + run.steps.len() + run.episodes.len());
    lines.push(RunLine::Meta { mode: run.mode.to_string(), seeds, table: table.clone() });
    let mut step_iter = run.steps.iter().peekable();
    for episode in &run.episodes {
        while let Some((seed, record)) = step_iter.peek() {
            if *seed != episode.seed {
                break;
            }
            lines.push(RunLine::Step { seed: *seed, record: *record });
            step_iter.next();
        }
        lines.push(RunLine::Episode { summary: *episode });
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiler::rollout_baseline;

    fn default_table() -> CalibrationTable {
        CalibrationTable::default()
    }

    #[test]
    fn static_full_matches_profiler_baseline() {
        let cfg = EnvConfig::default();
        let table = default_table();
        let (result, records) =
            simulate_episode(7, SimMode::Static(BitWidth::Full), &table, &cfg).unwrap();
        let baseline = rollout_baseline(7, &cfg);
        assert_eq!(result.success, baseline.result.success);
        assert_eq!(result.steps, baseline.result.steps);
        assert_eq!(result.terminal_deviation, baseline.result.terminal_deviation);
        assert_eq!(records.len(), baseline.actions.len());
        for (rec, action) in records.iter().zip(&baseline.actions) {
            assert_eq!(rec.action, *action);
        }
    }

    #[test]
    fn ledger_total_cost_equals_sum_of_records() {
        let cfg = EnvConfig::default();
        let table = default_table();
        for mode in [SimMode::Static(BitWidth::B4), SimMode::Dynamic] {
            let (result, records) = simulate_episode(11, mode, &table, &cfg).unwrap();
            let sum: f64 = records.iter().map(|r| r.cost).sum();
            assert_eq!(result.total_cost, sum);
        }
    }

    #[test]
    fn degenerate_table_dispatches_two_bits_after_warmup_and_delay() {
        let cfg = EnvConfig::default();
        // theta_fp far above any achievable sensitivity: never fall back.
        let table = CalibrationTable {
            theta_24: 1e9,
            theta_48: 1e9,
            theta_fp: 1e9,
            ..default_table()
        };
        let (_, records) = simulate_episode(5, SimMode::Dynamic, &table, &cfg).unwrap();
        let w = table.w_macro as u32;
        let k = table.k;
        for rec in &records {
            if rec.t < w {
                assert_eq!(rec.bits, BitWidth::Full, "warmup step {}", rec.t);
            } else if rec.t >= w + k {
                // After warmup the cold-start 16 needs K stable low targets
                // before the downgrade commits; then everything is 2-bit.
                assert_eq!(rec.bits, BitWidth::B2, "post-warmup step {}", rec.t);
            }
        }
    }

    #[test]
    fn dynamic_mode_rejects_invalid_table() {
        let cfg = EnvConfig::default();
        let table = CalibrationTable { theta_24: 0.4, theta_48: 0.1, ..default_table() };
        assert!(simulate_episode(0, SimMode::Dynamic, &table, &cfg).is_err());
    }

    #[test]
    fn suite_speedup_is_exactly_one_for_the_baseline_alone() {
        let cfg = EnvConfig::default();
        let seeds: Vec<u64> = (0..5).collect();
        let report =
            run_suite(&seeds, &[SimMode::Static(BitWidth::Full)], &default_table(), &cfg).unwrap();
        assert_eq!(report.modes.len(), 1);
        assert_eq!(report.modes[0].speedup, Some(1.0));
        assert_eq!(report.modes[0].bits_fraction.b16, 1.0);
    }

    #[test]
    fn all_four_bit_dispatch_speedup_matches_cost_ratio() {
        // On step-count-equal runs the suite speedup reduces to the cost
        // model ratio 1.0 / 0.55.
        let run16 = SimRun {
            mode: SimMode::Static(BitWidth::Full),
            episodes: vec![EpisodeSummary {
                seed: 0,
                success: true,
                terminal_deviation: 0.0,
                steps: 100,
                total_cost: 100.0,
            }],
            steps: Vec::new(),
        };
        let run4 = SimRun {
            mode: SimMode::Static(BitWidth::B4),
            episodes: vec![EpisodeSummary {
                seed: 0,
                success: true,
                terminal_deviation: 0.0,
                steps: 100,
                total_cost: 55.0,
            }],
            steps: Vec::new(),
        };
        let baseline = Some(100.0);
        let summary = summarize_run(&run4, baseline);
        assert!((summary.speedup.unwrap() - 1.0 / 0.55).abs() < 1e-12);
        assert_eq!(summarize_run(&run16, baseline).speedup, Some(1.0));
    }

    #[test]
    fn calibration_collection_contracts() {
        let cfg = EnvConfig::default();
        let table = default_table();
        let seeds: Vec<u64> = (0..6).collect();
        let (samples, stats) = collect_calibration(&seeds, &table, &cfg).unwrap();
        assert_eq!(stats.baselines_retained + stats.skipped_seeds.len(), seeds.len());
        assert_eq!(stats.samples, samples.len());

        // One sample per step of each retained trace.
        let expected: usize = seeds
            .iter()
            .filter_map(|&s| {
                let b = rollout_baseline(s, &cfg);
                b.result.success.then_some(b.len())
            })
            .sum();
        assert_eq!(samples.len(), expected);

        // Error monotonicity audit over the file.
        let n = samples.len() as f64;
        let (m2, m4, m8) = samples.iter().fold((0.0, 0.0, 0.0), |acc, s| {
            (acc.0 + s.e2 / n, acc.1 + s.e4 / n, acc.2 + s.e8 / n)
        });
        assert!(m2 >= m4 && m4 >= m8, "({m2}, {m4}, {m8})");
    }

    #[test]
    fn replay_all_zero_actions_hits_the_convex_weight() {
        let table = default_table();
        let actions = vec![Action::ZERO; 25];
        let schedule = replay_dispatch(&actions, &table).unwrap();
        // Post-warmup: M_bar = 1 (zero motion), J_bar = 0, so S = lambda.
        let post = &schedule[table.w_macro + 2..];
        for rec in post {
            assert!((rec.s - table.lambda).abs() < 1e-12);
            // lambda = 0.5 <= theta_fp = 0.5: quantized branch.
            assert!(rec.target != BitWidth::Full);
        }
        assert!(replay_dispatch(&[], &table).unwrap().is_empty());
        let twice = replay_dispatch(&actions, &table).unwrap();
        assert_eq!(schedule, twice);
    }

    #[test]
    fn mode_parsing_round_trips() {
        for text in ["static:16", "static:8", "static:4", "static:2", "dynamic"] {
            let mode: SimMode = text.parse().unwrap();
            assert_eq!(mode.to_string(), text);
        }
        assert!("static:3".parse::<SimMode>().is_err());
    }

    #[test]
    fn run_lines_round_trip_through_json() {
        let cfg = EnvConfig::default();
        let table = default_table();
        let run = simulate_run(&[0, 1], SimMode::Dynamic, &table, &cfg).unwrap();
        let lines = run_to_lines(&run, 2, &table);
        let text: Vec<String> =
            lines.iter().map(|l| serde_json::to_string(l).unwrap()).collect();
        for (line, original) in text.iter().zip(&lines) {
            let back: RunLine = serde_json::from_str(line).unwrap();
            match (original, back) {
                (RunLine::Meta { mode: a, .. }, RunLine::Meta { mode: b, .. }) => {
                    assert_eq!(*a, b)
                }
                (RunLine::Step { record: a, .. }, RunLine::Step { record: b, .. }) => {
                    assert_eq!(a.bits, b.bits)
                }
                (RunLine::Episode { summary: a }, RunLine::Episode { summary: b }) => {
                    assert_eq!(*a, b)
                }
                _ => panic!("line kind changed across round trip"),
            }
        }
    }
}
