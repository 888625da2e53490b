//! Online puncture detection during insertion.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::model::{PunctureModel, StreamState};
use super::train::normalize;
use crate::error::Result;
use crate::microscope::{Frame, Subsampler};
use crate::scene::Vec2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PunctureDetectorConfig {
    pub threshold: f64,
    /// Rate the network sees frames at.
    pub rate_hz: f64,
}

impl Default for PunctureDetectorConfig {
    fn default() -> Self {
        Self { threshold: 0.5, rate_hz: 7.0 }
    }
}

/// Crop of `side x side` pixels centred on `center`.
pub fn crop_at(frame: &Frame, center: Vec2, side: usize) -> Result<Vec<u8>> {
    let x0 = center.x.round() as i64 - (side / 2) as i64;
    let y0 = center.y.round() as i64 - (side / 2) as i64;
    frame.crop(x0, y0, side, side)
}

/// Feeds subsampled crops around a fixed image location to the network and
/// latches once the probability reaches the threshold.
pub struct PunctureDetector {
    model: Arc<PunctureModel>,
    config: PunctureDetectorConfig,
    center: Vec2,
    subsampler: Subsampler,
    stream: StreamState,
    pub fired: bool,
    pub last_probability: Option<f64>,
    pub frames_scored: usize,
}

impl PunctureDetector {
    pub fn new(model: Arc<PunctureModel>, center: Vec2, config: &PunctureDetectorConfig) -> Result<Self> {
        Ok(Self {
            model,
            subsampler: Subsampler::new(config.rate_hz)?,
            config: config.clone(),
            center,
            stream: StreamState::default(),
            fired: false,
            last_probability: None,
            frames_scored: 0,
        })
    }

    /// Returns the probability for frames the subsampler keeps, `None` otherwise.
    pub fn observe(&mut self, frame: &Frame) -> Result<Option<f64>> {
        if !self.subsampler.accept(frame.t)? {
            return Ok(None);
        }
        let crop = crop_at(frame, self.center, self.model.shape.input_side)?;
        let p = self.model.step_stream(&mut self.stream, &normalize(&crop))?;
        self.frames_scored += 1;
        self.last_probability = Some(p);
        if p >= self.config.threshold {
            self.fired = true;
        }
        Ok(Some(p))
    }
}
