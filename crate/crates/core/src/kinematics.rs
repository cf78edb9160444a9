//! Kinematic sensitivity proxies.
//!
//! Two per-step signals are extracted from executed actions: Motion Fineness
//! `M = 1 - |a_xyz| / mu_max` (high when the arm moves finely) and Angular
//! Jerk `J = |a_rot - a_rot_prev| / nu_max` (high on abrupt reorientation).
//! Both normalizers are 95th percentiles of bounded history buffers, so the
//! signals are scale-consistent across tasks. Asymmetric sliding windows
//! (broad for M, tight for J) are averaged and fused into the single score
//! `S = max(0, lambda * M_bar + (1 - lambda) * J_bar)` consumed by the
//! dispatcher.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor for the percentile normalizers so zero-motion histories cannot
/// divide by zero.
pub const PERCENTILE_FLOOR: f64 = 1e-6;

/// One control command: translational delta, rotational delta (radians) and
/// an absolute gripper setting in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub xyz: [f64; 3],
    pub rot: [f64; 3],
    pub gripper: f64,
}

impl Action {
    pub const ZERO: Action = Action { xyz: [0.0; 3], rot: [0.0; 3], gripper: 0.0 };

    pub fn translation_norm(&self) -> f64 {
        norm3(&self.xyz)
    }

    /// Check the domain invariants (all components finite, gripper in [0,1]).
    pub fn validate(&self) -> Result<(), ActionError> {
        for v in self.xyz.iter().chain(self.rot.iter()) {
            if !v.is_finite() {
                return Err(ActionError::NonFinite);
            }
        }
        if !self.gripper.is_finite() {
            return Err(ActionError::NonFinite);
        }
        if !(0.0..=1.0).contains(&self.gripper) {
            return Err(ActionError::GripperOutOfRange(self.gripper));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ActionError {
    #[error("action has a non-finite component")]
    NonFinite,
    #[error("gripper {0} outside [0, 1]")]
    GripperOutOfRange(f64),
}

pub(crate) fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Window and normalizer configuration for the tracker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicsConfig {
    /// Broad window averaging Motion Fineness.
    pub w_macro: usize,
    /// Tight window averaging Angular Jerk; must be < `w_macro`.
    pub w_micro: usize,
    /// Capacity of the percentile history ring buffers.
    pub history: usize,
    /// Convex weight on the macro mean in the fused score.
    pub lambda: f64,
    /// Cap on the normalized jerk (percentile normalizers let ~5% of raw
    /// values exceed 1; the cap keeps outliers from flooding the fusion).
    pub jerk_cap: f64,
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        KinematicsConfig { w_macro: 10, w_micro: 5, history: 256, lambda: 0.5, jerk_cap: 2.0 }
    }
}

impl KinematicsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.w_macro == 0 || self.w_micro == 0 {
            return Err("window sizes must be positive".into());
        }
        if self.w_micro >= self.w_macro {
            return Err(format!(
                "w_micro ({}) must be smaller than w_macro ({})",
                self.w_micro, self.w_macro
            ));
        }
        if self.history < self.w_macro {
            return Err("history must hold at least one macro window".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.jerk_cap <= 0.0 {
            return Err("jerk_cap must be positive".into());
        }
        Ok(())
    }
}

/// Per-step kinematic readouts plus the fused score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityState {
    /// Motion Fineness, clamped to [0, 1].
    pub m: f64,
    /// Angular Jerk, capped at `jerk_cap`.
    pub j: f64,
    /// Macro-window mean of M.
    pub m_bar: f64,
    /// Micro-window mean of J.
    pub j_bar: f64,
    /// Fused sensitivity, >= 0.
    pub s: f64,
    /// Set during the first `w_macro` observations; consumers must treat the
    /// score as "force full precision".
    pub warmup: bool,
}

impl SensitivityState {
    /// State before any observation: zero score, warmup set.
    pub fn cold() -> Self {
        SensitivityState { m: 0.0, j: 0.0, m_bar: 0.0, j_bar: 0.0, s: 0.0, warmup: true }
    }
}

/// Motion Fineness: `clamp(1 - |a_xyz| / mu_max, 0, 1)`.
pub fn motion_fineness(a: &Action, mu_max: f64) -> f64 {
    debug_assert!(mu_max > 0.0);
    (1.0 - a.translation_norm() / mu_max).clamp(0.0, 1.0)
}

/// Angular Jerk: `min(|a_rot - prev_rot| / nu_max, jerk_cap)`.
pub fn angular_jerk(a: &Action, a_prev: &Action, nu_max: f64, jerk_cap: f64) -> f64 {
    debug_assert!(nu_max > 0.0);
    let delta = [
        a.rot[0] - a_prev.rot[0],
        a.rot[1] - a_prev.rot[1],
        a.rot[2] - a_prev.rot[2],
    ];
    (norm3(&delta) / nu_max).min(jerk_cap)
}

/// Fused sensitivity: `max(0, lambda * m_bar + (1 - lambda) * j_bar)`.
pub fn fuse_sensitivity(m_bar: f64, j_bar: f64, lambda: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&lambda));
    (lambda * m_bar + (1.0 - lambda) * j_bar).max(0.0)
}

/// Exact nearest-rank percentile: `sorted[ceil(pct/100 * n) - 1]`.
/// Returns 0.0 for an empty slice.
pub fn percentile_nearest_rank(values: &[f64], pct: u32) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in percentile input"));
    let n = sorted.len();
    let rank = ((pct as usize * n).div_ceil(100)).max(1);
    sorted[rank - 1]
}

/// Single-owner per-stream tracker: histories for the percentile
/// normalizers, the two sliding windows, and the previous rotation command.
/// Mutate strictly in step order; one tracker per control stream.
#[derive(Debug, Clone, Serialize)]
pub struct KinematicTracker {
    cfg: KinematicsConfig,
    mag_history: VecDeque<f64>,
    jerk_history: VecDeque<f64>,
    macro_window: VecDeque<f64>,
    micro_window: VecDeque<f64>,
    prev_rot: Option<[f64; 3]>,
    steps_seen: u64,
    mu_max: f64,
    nu_max: f64,
    last: SensitivityState,
}

impl KinematicTracker {
    pub fn new(cfg: KinematicsConfig) -> Self {
        KinematicTracker {
            cfg,
            mag_history: VecDeque::with_capacity(cfg.history),
            jerk_history: VecDeque::with_capacity(cfg.history),
            macro_window: VecDeque::with_capacity(cfg.w_macro),
            micro_window: VecDeque::with_capacity(cfg.w_micro),
            prev_rot: None,
            steps_seen: 0,
            mu_max: PERCENTILE_FLOOR,
            nu_max: PERCENTILE_FLOOR,
            last: SensitivityState::cold(),
        }
    }

    pub fn config(&self) -> &KinematicsConfig {
        &self.cfg
    }

    pub fn steps_seen(&self) -> u64 {
        self.steps_seen
    }

    /// Current 95th-percentile magnitude normalizer.
    pub fn mu_max(&self) -> f64 {
        self.mu_max
    }

    /// Current 95th-percentile jerk normalizer.
    pub fn nu_max(&self) -> f64 {
        self.nu_max
    }

    /// State after the most recent observation ([`SensitivityState::cold`]
    /// before the first). This is what a causally-correct dispatcher reads
    /// when deciding the *next* step.
    pub fn state(&self) -> SensitivityState {
        self.last
    }

    /// Ingest one executed action and return the refreshed readouts.
    ///
    /// The first `w_macro` observations carry the warmup flag. The very
    /// first observation has no predecessor rotation, so its jerk is 0.
    pub fn observe(&mut self, a: &Action) -> SensitivityState {
        let warmup = self.steps_seen < self.cfg.w_macro as u64;

        let mag = a.translation_norm();
        let jerk_raw = match self.prev_rot {
            Some(prev) => {
                let d = [a.rot[0] - prev[0], a.rot[1] - prev[1], a.rot[2] - prev[2]];
                norm3(&d)
            }
            None => 0.0,
        };

        push_bounded(&mut self.mag_history, mag, self.cfg.history);
        push_bounded(&mut self.jerk_history, jerk_raw, self.cfg.history);

        self.mu_max =
            percentile_nearest_rank(self.mag_history.make_contiguous(), 95).max(PERCENTILE_FLOOR);
        self.nu_max =
            percentile_nearest_rank(self.jerk_history.make_contiguous(), 95).max(PERCENTILE_FLOOR);

        let m = (1.0 - mag / self.mu_max).clamp(0.0, 1.0);
        let j = (jerk_raw / self.nu_max).min(self.cfg.jerk_cap);

        push_bounded(&mut self.macro_window, m, self.cfg.w_macro);
        push_bounded(&mut self.micro_window, j, self.cfg.w_micro);

        let m_bar = mean(&self.macro_window);
        let j_bar = mean(&self.micro_window);
        let s = fuse_sensitivity(m_bar, j_bar, self.cfg.lambda);

        self.prev_rot = Some(a.rot);
        self.steps_seen += 1;
        self.last = SensitivityState { m, j, m_bar, j_bar, s, warmup };
        self.last
    }
}

fn push_bounded(buf: &mut VecDeque<f64>, value: f64, cap: usize) {
    if buf.len() == cap {
        buf.pop_front();
    }
    buf.push_back(value);
}

fn mean(buf: &VecDeque<f64>) -> f64 {
    if buf.is_empty() {
        return 0.0;
    }
    buf.iter().sum::<f64>() / buf.len() as f64
}
