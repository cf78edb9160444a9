//! Step-wise perturbation analysis.
//!
//! For each successful full-precision baseline episode, every step is probed
//! once: the episode re-runs deterministically with the policy quantized at
//! that single step, full precision resuming afterwards. The probe yields
//! the local action error `e_t`, the terminal deviation `D_T`, and the
//! post-hoc sensitivity `s_t = D_T / e_t`. Correlating the kinematic window
//! means observed on the baseline against `log(s_t)` validates the proxies.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    env_step, episode_status, policy_forward, reset, run_episode, EnvConfig, EnvState,
    EpisodeResult, Phase,
};
use crate::kinematics::{Action, KinematicTracker, KinematicsConfig, SensitivityState};
use crate::par;
use crate::quant::{action_error, BitWidth};

/// Steps whose injected action error falls below this are excluded from the
/// sensitivity ratio (grid-aligned features make the division meaningless).
pub const EPS_ERROR: f64 = 1e-9;
/// Guard inside `log(s_t + EPS_LOG)`.
pub const EPS_LOG: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ProfilerError {
    #[error("injection step {t} out of range (baseline has {len} steps)")]
    StepOutOfRange { t: usize, len: usize },
    #[error("cannot inject full precision; pick a quantized width")]
    FullPrecisionInjection,
    #[error("{included} included records, need at least {required} for correlation")]
    TooFewRecords { included: usize, required: usize },
}

/// A retained full-precision rollout. `states[t]` is the state *before*
/// `actions[t]`; the final state is appended last.
#[derive(Debug, Clone)]
pub struct BaselineTrace {
    pub seed: u64,
    pub states: Vec<EnvState>,
    pub actions: Vec<Action>,
    pub result: EpisodeResult,
}

impl BaselineTrace {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Full-precision rollout for one seed (bits = 16 at every step).
pub fn rollout_baseline(seed: u64, cfg: &EnvConfig) -> BaselineTrace {
    let (result, trace) = run_episode(seed, cfg, |_| BitWidth::Full);
    let mut states: Vec<EnvState> = trace.iter().map(|(s, _)| *s).collect();
    let actions: Vec<Action> = trace.iter().map(|(_, a)| *a).collect();
    // Terminal state retained for prefix-equality checks.
    if let Some((last_state, last_action)) = trace.last() {
        states.push(env_step(last_state, last_action, cfg));
    } else {
        states.push(reset(seed, cfg));
    }
    BaselineTrace { seed, states, actions, result }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbOutcome {
    /// Action deviation introduced at the injected step.
    pub e_t: f64,
    /// Terminal deviation of the perturbed episode.
    pub d_t: f64,
    pub success: bool,
}

/// Re-run `seed` deterministically with `bits` injected at step `t` only.
pub fn perturb_at(
    seed: u64,
    t: usize,
    bits: BitWidth,
    cfg: &EnvConfig,
) -> Result<PerturbOutcome, ProfilerError> {
    if bits == BitWidth::Full {
        return Err(ProfilerError::FullPrecisionInjection);
    }
    let mut state = reset(seed, cfg);
    let mut e_t = 0.0;
    let mut step = 0usize;
    loop {
        let (done, success, deviation) = episode_status(&state, cfg);
        if done {
            if step <= t {
                return Err(ProfilerError::StepOutOfRange { t, len: step });
            }
            return Ok(PerturbOutcome { e_t, d_t: deviation, success });
        }
        let action = if step == t {
            let injected = policy_forward(&state, bits, cfg).expect("not done");
            let exact = policy_forward(&state, BitWidth::Full, cfg).expect("not done");
            e_t = action_error(&injected, &exact);
            injected
        } else {
            policy_forward(&state, BitWidth::Full, cfg).expect("not done")
        };
        state = env_step(&state, &action, cfg);
        step += 1;
    }
}

/// One profiled step, serialized as a JSONL record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub seed: u64,
    pub t: u32,
    pub phase: Phase,
    pub e_t: f64,
    #[serde(rename = "D_T")]
    pub d_t: f64,
    pub success: bool,
    /// `D_T / e_t`; absent when the record is excluded.
    pub s_t: Option<f64>,
    #[serde(rename = "M_bar")]
    pub m_bar: f64,
    #[serde(rename = "J_bar")]
    pub j_bar: f64,
    pub excluded: bool,
}

/// Kinematic readouts along a baseline, one per step, *including* the
/// current action (profiling view; the dispatcher's causal view lags one
/// step behind).
pub fn baseline_kinematics(trace: &BaselineTrace, kin: &KinematicsConfig) -> Vec<SensitivityState> {
    let mut tracker = KinematicTracker::new(*kin);
    trace.actions.iter().map(|a| tracker.observe(a)).collect()
}

/// Summary of a profiling run, alongside the per-step records.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ProfileStats {
    pub seeds_requested: usize,
    pub baselines_retained: usize,
    /// Seeds skipped because the full-precision baseline failed.
    pub skipped_seeds: Vec<u64>,
    pub records: usize,
    pub excluded_records: usize,
}

/// Probe every step of every retained baseline with a `bits` injection.
/// Records come out ordered by (seed, t) regardless of parallelism.
pub fn profile(
    seeds: &[u64],
    bits: BitWidth,
    cfg: &EnvConfig,
    kin: &KinematicsConfig,
) -> Result<(Vec<ProfileRecord>, ProfileStats), ProfilerError> {
    if bits == BitWidth::Full {
        return Err(ProfilerError::FullPrecisionInjection);
    }
    let mut stats = ProfileStats { seeds_requested: seeds.len(), ..ProfileStats::default() };

    let per_seed: Vec<Option<Vec<ProfileRecord>>> = par::map(seeds, |&seed| {
        let baseline = rollout_baseline(seed, cfg);
        if !baseline.result.success {
            return None;
        }
        let kinematics = baseline_kinematics(&baseline, kin);
        let records = (0..baseline.len())
            .map(|t| {
                let outcome =
                    perturb_at(seed, t, bits, cfg).expect("t < baseline length by construction");
                let excluded = outcome.e_t <= EPS_ERROR;
                ProfileRecord {
                    seed,
                    t: t as u32,
                    phase: baseline.states[t].phase,
                    e_t: outcome.e_t,
                    d_t: outcome.d_t,
                    success: outcome.success,
                    s_t: (!excluded).then(|| outcome.d_t / outcome.e_t),
                    m_bar: kinematics[t].m_bar,
                    j_bar: kinematics[t].j_bar,
                    excluded,
                }
            })
            .collect();
        Some(records)
    });

    let mut records = Vec::new();
    for (seed, entry) in seeds.iter().zip(per_seed) {
        match entry {
            Some(mut r) => {
                stats.baselines_retained += 1;
                records.append(&mut r);
            }
            None => stats.skipped_seeds.push(*seed),
        }
    }
    stats.records = records.len();
    stats.excluded_records = records.iter().filter(|r| r.excluded).count();
    Ok((records, stats))
}

/// Pearson correlation coefficient; NaN only if either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// Pooled correlation of the window means against log-scaled sensitivity
/// over included records: `(r_M, r_J)`.
pub fn proxy_correlation(records: &[ProfileRecord]) -> Result<(f64, f64), ProfilerError> {
    let included: Vec<&ProfileRecord> = records.iter().filter(|r| !r.excluded).collect();
    if included.len() < 30 {
        return Err(ProfilerError::TooFewRecords { included: included.len(), required: 30 });
    }
    let log_s: Vec<f64> = included
        .iter()
        .map(|r| (r.s_t.expect("included records carry s_t") + EPS_LOG).ln())
        .collect();
    let m: Vec<f64> = included.iter().map(|r| r.m_bar).collect();
    let j: Vec<f64> = included.iter().map(|r| r.j_bar).collect();
    Ok((pearson(&m, &log_s), pearson(&j, &log_s)))
}
