//! Workflow state machine, planner, safety layer and the episode engine.

pub mod fsm;
pub mod log;
pub mod mpc;
pub mod safety;
pub mod servo;

pub use fsm::{next_state, SurgicalEvent, SurgicalState};
pub use log::{EpisodeLog, FrameRecord, LogHeader, MpcSummary};
pub use mpc::{build_mpc, solve_mpc, MotionConstraint, MpcConfig, MpcProblem, Trajectory, Workspace};
pub use safety::{safety_filter, teleop_velocity, SafetyLimits, SafetyReport};
pub use servo::{servo_step, ServoOutput};
pub mod session;
pub use session::{AutonomyConfig, Command, ControlMode, Episode, EpisodeSetup, PerceptionConfig, Source, TickOutput};
