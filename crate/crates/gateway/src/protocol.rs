//! Wire format shared with the operator console.
//!
//! Frames go out as binary messages: `seq` (u64 LE), `t` (f64 LE), then the
//! PNG bytes. Everything else is tagged JSON text.

use cannula_core::autonomy::{ControlMode, SurgicalEvent, SurgicalState};
use cannula_core::harness::TrialMetrics;
use serde::{Deserialize, Serialize};

pub const FRAME_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    ClickGoal { px: [f64; 2] },
    SetMode { mode: ControlMode },
    Teleop { axes: [f64; 3], pedal: f64 },
    Abort,
    StartTrial { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMsg {
    pub seq: u64,
    pub t: f64,
    pub state: SurgicalState,
    pub mode: ControlMode,
    pub tip_px_est: Option<[f64; 2]>,
    /// Present once the trial has ended.
    pub metrics: Option<TrialMetrics>,
    pub f: Option<f64>,
    pub y_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(StateMsg),
    Event { event: SurgicalEvent, t: f64 },
    Rejected { reason: String },
    TrialStarted { trial_seed: u64, scene_seed: u64 },
    Error { message: String },
}

pub fn encode_frame_packet(seq: u64, t: f64, png: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + png.len());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(png);
    out
}

/// Splits a binary frame message into `(seq, t, png)`.
pub fn decode_frame_packet(bytes: &[u8]) -> Option<(u64, f64, &[u8])> {
    if bytes.len() < FRAME_HEADER_LEN {
        return None;
    }
    let seq = u64::from_le_bytes(bytes[0..8].try_into().ok()?);
    let t = f64::from_le_bytes(bytes[8..16].try_into().ok()?);
    Some((seq, t, &bytes[FRAME_HEADER_LEN..]))
}
