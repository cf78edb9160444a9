//! Deterministic toy manipulation environment and scripted policy.
//!
//! A point end-effector picks an object and carries it to a goal through a
//! monotone phase machine: Transit (coarse horizontal travel in a high
//! plane), Align (slow descent with rotational adjustment), Grasp (gripper
//! close), Place (carry to the goal and release). The policy is a
//! proportional controller whose intermediate feature vector — error terms,
//! gains, phase encodings, dither — passes through [`fake_quant`] before the
//! action is assembled, so low bit-widths corrupt the control signal in a
//! state-dependent way while 16-bit bypasses quantization entirely.
//!
//! The construction guarantees the kinematic regimes the dispatcher relies
//! on: transit actions have large translations and near-zero rotational
//! jerk; align actions are small and rotationally busy. It also makes fine
//! phases *irreversibly* fragile: a fast move near the un-grasped object
//! knocks it over (it topples and can no longer be grasped), while the same
//! noise during transit is simply corrected away by feedback. That is the
//! error-compounding asymmetry the dispatcher exists to manage.
//!
//! Everything is a pure function of `(seed, bit sequence)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kinematics::{norm3, Action};
use crate::quant::{fake_quant, BitWidth};

/// Task phases in execution order. Transitions never regress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Transit,
    Align,
    Grasp,
    Place,
    Done,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Phase::Transit => "Transit",
            Phase::Align => "Align",
            Phase::Grasp => "Grasp",
            Phase::Place => "Place",
            Phase::Done => "Done",
        };
        write!(f, "{name}")
    }
}

/// Workspace geometry, controller gains and tolerances. All values are task
/// configuration, serialized as a single JSON document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Positions are clamped to `[-half_extent, half_extent]^3`.
    pub workspace_half_extent: f64,
    /// Object/goal sampling box half extent (strictly inside the workspace).
    pub sample_half_extent: f64,
    /// Table height where object and goal sit.
    pub table_z: f64,
    /// Travel plane height for transit; the end-effector starts here, so
    /// transit is purely horizontal and the align descent is short and slow.
    pub travel_z: f64,
    /// Per-step translation clip.
    pub step_clip: f64,
    /// Per-axis rotation clip per step (radians).
    pub rot_clip: f64,
    /// Transit completes when the end-effector is within this distance of
    /// the point above the object.
    pub hover_tol: f64,
    /// Align completes (grasp begins) at this end-effector/object distance.
    pub align_tol: f64,
    /// Constant wrist-reference drift per step (radians). The rotation
    /// channel continuously tracks a moving reference, so a quantization-
    /// nulled rotation command is a real error in every phase.
    pub wrist_rate: f64,
    /// Objects within this radius of a closed gripper move with it.
    pub grasp_radius: f64,
    /// Gripper reading at or above this counts as closed.
    pub close_threshold: f64,
    /// Gripper reading at or below this counts as released.
    pub release_threshold: f64,
    /// Gripper command that advances Grasp to Place.
    pub grasp_commit: f64,
    /// Object-to-goal distance at which Place releases.
    pub place_tol: f64,
    pub success_tolerance: f64,
    pub max_steps: u32,
    /// Minimum horizontal start-to-object distance (length of the transit leg).
    pub min_object_distance: f64,
    /// Minimum horizontal object-to-goal distance (length of the place leg).
    pub min_goal_separation: f64,
    /// A fast un-grasped move ending within this radius of the object knocks it.
    pub knock_radius: f64,
    /// Executed translation speed above which a nearby move knocks the object.
    pub knock_speed: f64,
    /// Horizontal displacement of a knocked object.
    pub knock_kick: f64,
    /// Proportional gain for coarse legs.
    pub coarse_gain: f64,
    /// Proportional gain for fine legs.
    pub fine_gain: f64,
    /// Rotation tracking gain; kept small so mid-width rotation noise stays
    /// below the tracking rate.
    pub rot_gain: f64,
    /// Place switches from the coarse to the fine gain below this distance.
    pub fine_switch_dist: f64,
    /// Amplitude of the rotational dither bursts during Align.
    pub dither_amp: f64,
    /// Gripper logits; the action gripper is `clamp(0.5 + 0.5 * logit, 0, 1)`.
    pub grip_open_logit: f64,
    pub grip_close_logit: f64,
    pub grip_ramp_logit: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            workspace_half_extent: 1.0,
            sample_half_extent: 0.75,
            table_z: 0.02,
            travel_z: 0.14,
            step_clip: 0.05,
            rot_clip: 0.3,
            hover_tol: 0.05,
            align_tol: 0.012,
            wrist_rate: 0.06,
            grasp_radius: 0.03,
            close_threshold: 0.6,
            release_threshold: 0.4,
            grasp_commit: 0.9,
            place_tol: 0.012,
            success_tolerance: 0.02,
            max_steps: 300,
            min_object_distance: 0.6,
            min_goal_separation: 0.9,
            knock_radius: 0.06,
            knock_speed: 0.045,
            knock_kick: 0.18,
            coarse_gain: 1.0,
            fine_gain: 0.3,
            rot_gain: 0.3,
            fine_switch_dist: 0.1,
            dither_amp: 0.12,
            grip_open_logit: -1.5,
            grip_close_logit: 1.5,
            grip_ramp_logit: 0.3,
        }
    }
}

/// Full environment state; a plain value. `env_step` is a pure transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub ee_pos: [f64; 3],
    pub ee_rot: [f64; 3],
    pub gripper: f64,
    pub object_pos: [f64; 3],
    pub goal_pos: [f64; 3],
    /// Wrist reference at step 0, sampled at reset.
    pub rot_base: [f64; 3],
    /// Unit drift direction of the wrist reference.
    pub wrist_axis: [f64; 3],
    pub phase: Phase,
    pub step_index: u32,
    pub rng_seed: u64,
    /// Set when the object has been knocked over; a toppled object can no
    /// longer be grasped.
    pub toppled: bool,
}

/// Episode outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    /// Distance of the object from the goal at episode end.
    pub terminal_deviation: f64,
    pub steps: u32,
    /// Sum of per-step cost-model values; 0 when no cost model was applied.
    pub total_cost: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("policy queried after the episode completed (phase = Done)")]
    EpisodeComplete,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            self.step_clip,
            self.rot_clip,
            self.grasp_radius,
            self.success_tolerance,
            self.coarse_gain,
            self.fine_gain,
            self.rot_gain,
        ];
        if positive.iter().any(|v| *v <= 0.0) {
            return Err(EnvError::InvalidConfig("gains, clips and tolerances must be positive".into()));
        }
        if self.sample_half_extent >= self.workspace_half_extent {
            return Err(EnvError::InvalidConfig(
                "sampling box must sit strictly inside the workspace".into(),
            ));
        }
        if self.max_steps == 0 {
            return Err(EnvError::InvalidConfig("max_steps must be positive".into()));
        }
        Ok(())
    }
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    norm3(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

fn horizontal_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp_box(p: [f64; 3], half: f64) -> [f64; 3] {
    [p[0].clamp(-half, half), p[1].clamp(-half, half), p[2].clamp(-half, half)]
}

fn clip_norm(v: [f64; 3], max_norm: f64) -> [f64; 3] {
    let n = norm3(&v);
    if n <= max_norm || n == 0.0 {
        v
    } else {
        let f = max_norm / n;
        [v[0] * f, v[1] * f, v[2] * f]
    }
}

/// Deterministic initial state: object and goal sampled in the workspace
/// with enforced leg lengths, identical seed, identical state.
pub fn reset(seed: u64, cfg: &EnvConfig) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = cfg.sample_half_extent;
    let ee_pos = [
        rng.random_range(-0.02..0.02),
        rng.random_range(-0.02..0.02),
        cfg.travel_z,
    ];
    // Rejection-sample the pair jointly so both legs are long enough.
    let (object_pos, goal_pos) = loop {
        let obj = [rng.random_range(-half..half), rng.random_range(-half..half), cfg.table_z];
        let goal = [rng.random_range(-half..half), rng.random_range(-half..half), cfg.table_z];
        if horizontal_dist(&ee_pos, &obj) >= cfg.min_object_distance
            && horizontal_dist(&obj, &goal) >= cfg.min_goal_separation
        {
            break (obj, goal);
        }
    };
    let rot_base = [
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.4..0.4),
    ];
    let raw_axis: [f64; 3] = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let n = norm3(&raw_axis).max(1e-9);
    let wrist_axis = [raw_axis[0] / n, raw_axis[1] / n, raw_axis[2] / n];
    EnvState {
        ee_pos,
        ee_rot: [0.0; 3],
        gripper: 0.0,
        object_pos,
        goal_pos,
        rot_base,
        wrist_axis,
        phase: Phase::Transit,
        step_index: 0,
        rng_seed: seed,
        toppled: false,
    }
}

/// Wrist reference orientation at a given step.
fn rot_reference(s: &EnvState, cfg: &EnvConfig) -> [f64; 3] {
    let t = s.step_index as f64;
    [
        s.rot_base[0] + cfg.wrist_rate * t * s.wrist_axis[0],
        s.rot_base[1] + cfg.wrist_rate * t * s.wrist_axis[1],
        s.rot_base[2] + cfg.wrist_rate * t * s.wrist_axis[2],
    ]
}

pub const FEATURE_DIM: usize = 21;

/// Assemble the controller's feature vector for the current state.
///
/// Layout: [0..3) position error, [3..6) rotation error, [6] gripper logit,
/// [7] translation gain, [8] rotation gain, [9..14) phase one-hot,
/// [14..17) rotational dither, [17] clamped distance-to-target,
/// [18..21) goal-object error.
fn features(s: &EnvState, cfg: &EnvConfig) -> [f64; FEATURE_DIM] {
    let hover = [s.object_pos[0], s.object_pos[1], cfg.travel_z];
    let (target, k_p, grip_logit): ([f64; 3], f64, f64) = match s.phase {
        Phase::Transit => (hover, cfg.coarse_gain, cfg.grip_open_logit),
        Phase::Align => (s.object_pos, cfg.fine_gain, cfg.grip_open_logit),
        Phase::Grasp => {
            let logit = if s.gripper < cfg.close_threshold {
                cfg.grip_ramp_logit
            } else {
                cfg.grip_close_logit
            };
            (s.object_pos, cfg.fine_gain, logit)
        }
        Phase::Place => {
            let carry_err = dist3(&s.object_pos, &s.goal_pos);
            let gain = if carry_err > cfg.fine_switch_dist { cfg.coarse_gain } else { cfg.fine_gain };
            let logit = if carry_err <= cfg.place_tol {
                cfg.grip_open_logit
            } else {
                cfg.grip_close_logit
            };
            (s.goal_pos, gain, logit)
        }
        Phase::Done => ([0.0; 3], 0.0, cfg.grip_open_logit),
    };

    // Position error: Place steers the *object* toward the goal (the object
    // rides the gripper), other phases steer the end-effector.
    let e_p = match s.phase {
        Phase::Place => [
            s.goal_pos[0] - s.object_pos[0],
            s.goal_pos[1] - s.object_pos[1],
            s.goal_pos[2] - s.object_pos[2],
        ],
        _ => [
            target[0] - s.ee_pos[0],
            target[1] - s.ee_pos[1],
            target[2] - s.ee_pos[2],
        ],
    };
    let rot_ref = rot_reference(s, cfg);
    let e_r = [
        rot_ref[0] - s.ee_rot[0],
        rot_ref[1] - s.ee_rot[1],
        rot_ref[2] - s.ee_rot[2],
    ];

    // Bursty rotational adjustment during Align: two busy steps out of four.
    let dither = if s.phase == Phase::Align && s.step_index % 4 < 2 {
        let i = s.step_index as f64;
        [
            cfg.dither_amp * (1.7 * i).sin(),
            cfg.dither_amp * (2.3 * i).cos(),
            0.0,
        ]
    } else {
        [0.0; 3]
    };

    let mut one_hot = [0.0; 5];
    one_hot[match s.phase {
        Phase::Transit => 0,
        Phase::Align => 1,
        Phase::Grasp => 2,
        Phase::Place => 3,
        Phase::Done => 4,
    }] = 1.0;

    let goal_err = [
        s.goal_pos[0] - s.object_pos[0],
        s.goal_pos[1] - s.object_pos[1],
        s.goal_pos[2] - s.object_pos[2],
    ];

    [
        e_p[0], e_p[1], e_p[2],
        e_r[0], e_r[1], e_r[2],
        grip_logit,
        k_p,
        cfg.rot_gain,
        one_hot[0], one_hot[1], one_hot[2], one_hot[3], one_hot[4],
        dither[0], dither[1], dither[2],
        norm3(&e_p).min(1.5),
        goal_err[0], goal_err[1], goal_err[2],
    ]
}

/// Scripted proportional controller with a quantizable feature stage.
/// `bits = Full` bypasses quantization and reproduces the expert exactly.
pub fn policy_forward(s: &EnvState, bits: BitWidth, cfg: &EnvConfig) -> Result<Action, EnvError> {
    if s.phase == Phase::Done {
        return Err(EnvError::EpisodeComplete);
    }
    let feats = features(s, cfg);
    let f = fake_quant(&feats, bits).expect("feature vector is finite and non-empty");

    let xyz = clip_norm([f[7] * f[0], f[7] * f[1], f[7] * f[2]], cfg.step_clip);
    let rot = [
        (f[8] * f[3] + f[14]).clamp(-cfg.rot_clip, cfg.rot_clip),
        (f[8] * f[4] + f[15]).clamp(-cfg.rot_clip, cfg.rot_clip),
        (f[8] * f[5] + f[16]).clamp(-cfg.rot_clip, cfg.rot_clip),
    ];
    let gripper = (0.5 + 0.5 * f[6]).clamp(0.0, 1.0);
    Ok(Action { xyz, rot, gripper })
}

/// Pure transition. The gripper command takes effect on the *next* step's
/// attachment check (one-step actuator delay); a grasped object tracks the
/// executed end-effector displacement exactly.
pub fn env_step(s: &EnvState, a: &Action, cfg: &EnvConfig) -> EnvState {
    let half = cfg.workspace_half_extent;

    let grasped = !s.toppled
        && s.gripper >= cfg.close_threshold
        && dist3(&s.ee_pos, &s.object_pos) <= cfg.grasp_radius;

    let delta = clip_norm(a.xyz, cfg.step_clip);
    let ee_new = clamp_box(
        [s.ee_pos[0] + delta[0], s.ee_pos[1] + delta[1], s.ee_pos[2] + delta[2]],
        half,
    );
    let executed = [
        ee_new[0] - s.ee_pos[0],
        ee_new[1] - s.ee_pos[1],
        ee_new[2] - s.ee_pos[2],
    ];

    let mut object_pos = if grasped {
        clamp_box(
            [
                s.object_pos[0] + executed[0],
                s.object_pos[1] + executed[1],
                s.object_pos[2] + executed[2],
            ],
            half,
        )
    } else {
        s.object_pos
    };

    let ee_rot = [
        s.ee_rot[0] + a.rot[0].clamp(-cfg.rot_clip, cfg.rot_clip),
        s.ee_rot[1] + a.rot[1].clamp(-cfg.rot_clip, cfg.rot_clip),
        s.ee_rot[2] + a.rot[2].clamp(-cfg.rot_clip, cfg.rot_clip),
    ];
    let gripper = a.gripper.clamp(0.0, 1.0);

    // A fast un-grasped move ending near the object topples it.
    let mut toppled = s.toppled;
    if !grasped
        && norm3(&executed) > cfg.knock_speed
        && dist3(&ee_new, &object_pos) <= cfg.knock_radius
    {
        let away = [object_pos[0] - ee_new[0], object_pos[1] - ee_new[1]];
        let n = (away[0] * away[0] + away[1] * away[1]).sqrt();
        let dir = if n < 1e-9 { [1.0, 0.0] } else { [away[0] / n, away[1] / n] };
        object_pos = clamp_box(
            [
                object_pos[0] + cfg.knock_kick * dir[0],
                object_pos[1] + cfg.knock_kick * dir[1],
                object_pos[2],
            ],
            half,
        );
        toppled = true;
    }

    // Monotone phase machine, one transition per step.
    let hover = [object_pos[0], object_pos[1], cfg.travel_z];
    let phase = match s.phase {
        Phase::Transit if dist3(&ee_new, &hover) <= cfg.hover_tol => Phase::Align,
        Phase::Align if dist3(&ee_new, &object_pos) <= cfg.align_tol => Phase::Grasp,
        // The machine trusts the actuator: a closed gripper advances the
        // phase whether or not the object was actually secured.
        Phase::Grasp if gripper >= cfg.grasp_commit => Phase::Place,
        Phase::Place
            if gripper <= cfg.release_threshold
                && dist3(&object_pos, &s.goal_pos) <= cfg.success_tolerance =>
        {
            Phase::Done
        }
        other => other,
    };

    EnvState {
        ee_pos: ee_new,
        ee_rot,
        gripper,
        object_pos,
        goal_pos: s.goal_pos,
        rot_base: s.rot_base,
        wrist_axis: s.wrist_axis,
        phase,
        step_index: s.step_index + 1,
        rng_seed: s.rng_seed,
        toppled,
    }
}

/// `(done, success, terminal_deviation)`. Success requires a complete
/// episode with the object within tolerance (closed boundary).
pub fn episode_status(s: &EnvState, cfg: &EnvConfig) -> (bool, bool, f64) {
    let deviation = dist3(&s.object_pos, &s.goal_pos);
    let done = s.phase == Phase::Done || s.step_index >= cfg.max_steps;
    let success = done && deviation <= cfg.success_tolerance;
    (done, success, deviation)
}

/// Roll an episode with a per-step bit-width chooser. The chooser sees the
/// state *before* the step. Returns the result and the per-step
/// (state-before, action) trace; `total_cost` is left at zero.
pub fn run_episode<F>(
    seed: u64,
    cfg: &EnvConfig,
    mut choose_bits: F,
) -> (EpisodeResult, Vec<(EnvState, Action)>)
where
    F: FnMut(&EnvState) -> BitWidth,
{
    let mut state = reset(seed, cfg);
    let mut trace = Vec::new();
    loop {
        let (done, success, deviation) = episode_status(&state, cfg);
        if done {
            return (
                EpisodeResult {
                    success,
                    terminal_deviation: deviation,
                    steps: state.step_index,
                    total_cost: 0.0,
                },
                trace,
            );
        }
        let bits = choose_bits(&state);
        let action = policy_forward(&state, bits, cfg).expect("phase != Done inside loop");
        let next = env_step(&state, &action, cfg);
        trace.push((state, action));
        state = next;
    }
}
