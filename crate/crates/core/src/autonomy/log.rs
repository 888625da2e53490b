//! Per-frame episode records, written as JSON lines.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fsm::{SurgicalEvent, SurgicalState};
use crate::error::{Error, Result};
use crate::microscope::Calibration;
use crate::scene::PhaseFlags;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub scene_seed: u64,
    pub trial_seed: u64,
    pub goal_px: Option<[f64; 2]>,
    pub calibration: Calibration,
    pub dt: f64,
    pub perception: String,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSummary {
    pub cost: f64,
    pub iterations: usize,
    pub max_violation: f64,
    pub max_rcm_residual: f64,
    pub cost_non_increasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub t: f64,
    /// State after this frame's events; the logged control belongs to it.
    pub state: SurgicalState,
    pub events: Vec<SurgicalEvent>,
    pub tip_gt: [f64; 3],
    pub tip_gt_px: [f64; 2],
    pub robot: [f64; 3],
    pub tip_est_px: Option<[f64; 2]>,
    pub control: [f64; 3],
    pub ncc_max: Option<f64>,
    pub f: Option<f64>,
    pub y_hat: Option<f64>,
    pub flags: PhaseFlags,
    pub deflection: f64,
    pub teleop: bool,
    pub mpc: Option<MpcSummary>,
    pub safety: Option<String>,
    pub fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(LogHeader),
    Frame(FrameRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub frames: Vec<FrameRecord>,
}

impl EpisodeLog {
    pub fn final_state(&self) -> Option<SurgicalState> {
        self.frames.last().map(|f| f.state)
    }

    /// Index of the first frame carrying an event of the given kind.
    pub fn event_frame(&self, name: &str) -> Option<usize> {
        self.frames.iter().position(|f| f.events.iter().any(|e| e.name() == name))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &Line::Header(self.header.clone()))?;
        writeln!(w)?;
        for f in &self.frames {
            serde_json::to_writer(&mut w, &Line::Frame(f.clone()))?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut header = None;
        let mut frames = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Line>(&line)? {
                Line::Header(h) if header.is_none() => header = Some(h),
                Line::Header(_) => return Err(Error::Contract(format!("line {}: second header", i + 1))),
                Line::Frame(f) => frames.push(f),
            }
        }
        let header = header.ok_or_else(|| Error::Contract("episode log has no header".into()))?;
        Ok(Self { header, frames })
    }
}
