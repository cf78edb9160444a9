//! Dynamic-precision dispatch for closed-loop control policies.
//!
//! The crate decides, per control step, how many bits the policy's internal
//! feature stage may be quantized to without compromising the task. It has
//! three layers:
//!
//! - **Signal**: [`quant`] injects uniform affine quantization noise;
//!   [`kinematics`] turns executed actions into a fused sensitivity score
//!   built from Motion Fineness and Angular Jerk over asymmetric windows.
//! - **Decision**: [`dispatcher`] maps sensitivity to a target bit-width
//!   through a calibrated lookup table plus a full-precision fallback, then
//!   stabilizes it with a saturating-counter hysteresis machine (immediate
//!   upgrades, delayed downgrades).
//! - **Evidence**: [`calibration`] derives the lookup thresholds offline from
//!   logged per-bit action errors; [`env`] is a deterministic toy
//!   manipulation task whose fine phases genuinely need precision;
//!   [`profiler`] measures step-wise sensitivity by single-step perturbation;
//!   [`harness`] runs closed-loop simulations, collects calibration data, and
//!   reports cost/success trade-offs.
//!
//! Episodes and perturbation probes are embarrassingly parallel across seeds;
//! the `parallel` feature (on by default) runs them on rayon, with a
//! sequential lane kept for comparison and for `--no-default-features`
//! builds. All emitted numbers are aggregated in seed order, so output files
//! are byte-identical regardless of thread count.

pub mod calibration;
pub mod dispatcher;
pub mod env;
pub mod harness;
pub mod kinematics;
pub mod par;
pub mod profiler;
pub mod quant;

pub use dispatcher::{CalibrationTable, CostModel, DispatcherState};
pub use kinematics::{Action, KinematicTracker, KinematicsConfig, SensitivityState};
pub use quant::BitWidth;
