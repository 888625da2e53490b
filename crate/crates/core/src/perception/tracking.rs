//! Frame-to-frame needle tip tracking by local template search.

use serde::{Deserialize, Serialize};

use super::ncc::{acquire_template, ncc_map_region, Template};
use crate::error::{Error, Result};
use crate::microscope::Frame;
use crate::scene::Vec2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub template_size: [usize; 2],
    /// Search half-width in pixels around the previous estimate.
    pub search_radius: i64,
    /// Peak scores below this raise `TrackingLost`.
    pub score_floor: f64,
    /// Re-cut the template once the tip has moved this far from where it was
    /// cut. Each re-cut bakes the current error into the template, so this is
    /// off unless the needle's appearance changes a lot along the path.
    pub refresh_distance_px: Option<f64>,
    /// Intensities at or below this are flattened to zero before matching, so
    /// the static retina texture does not anchor the template.
    pub enhance_threshold: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { template_size: [32, 32], search_radius: 20, score_floor: 0.4, refresh_distance_px: None, enhance_threshold: Some(180.0) }
    }
}

/// Keeps only the bright needle: `max(0, v - threshold)`, rescaled to 0..=255.
pub fn enhance_needle(frame: &Frame, threshold: f64) -> Frame {
    let span = (255.0 - threshold).max(1.0);
    let pixels = frame
        .pixels
        .iter()
        .map(|&v| ((v as f64 - threshold).max(0.0) * 255.0 / span).round().min(255.0) as u8)
        .collect();
    Frame { width: frame.width, height: frame.height, pixels, t: frame.t, px_per_mm: frame.px_per_mm }
}

fn prepare<'a>(frame: &'a Frame, config: &TrackerConfig) -> std::borrow::Cow<'a, Frame> {
    match config.enhance_threshold {
        Some(th) => std::borrow::Cow::Owned(enhance_needle(frame, th)),
        None => std::borrow::Cow::Borrowed(frame),
    }
}

/// One tracking step: searches around `prev_px` and returns the sub-pixel tip
/// estimate together with the peak score.
pub fn track_tip(frame: &Frame, template: &Template, prev_px: Vec2, config: &TrackerConfig) -> Result<(Vec2, f64)> {
    let frame = prepare(frame, config);
    let anchor = template.anchor();
    let cx = (prev_px.x - anchor.x).round() as i64;
    let cy = (prev_px.y - anchor.y).round() as i64;
    let r = config.search_radius;
    let ncc = ncc_map_region(&frame, template, [cx - r, cx + r], [cy - r, cy + r])?;
    if ncc.max_score < config.score_floor {
        return Err(Error::TrackingLost { score: ncc.max_score, floor: config.score_floor });
    }
    Ok((ncc.subpixel_max() + anchor, ncc.max_score))
}

/// Tracker that keeps its template fresh while the needle translates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TipTracker {
    pub template: Template,
    pub config: TrackerConfig,
    pub estimate: [f64; 2],
    pub last_score: f64,
    cut_at: [f64; 2],
}

impl TipTracker {
    pub fn new(frame: &Frame, tip_px: Vec2, config: &TrackerConfig) -> Result<Self> {
        let template = acquire_template(&prepare(frame, config), tip_px, config.template_size)?;
        Ok(Self {
            template,
            config: config.clone(),
            estimate: [tip_px.x, tip_px.y],
            last_score: 1.0,
            cut_at: [tip_px.x, tip_px.y],
        })
    }

    pub fn estimate(&self) -> Vec2 {
        Vec2::new(self.estimate[0], self.estimate[1])
    }

    pub fn update(&mut self, frame: &Frame) -> Result<Vec2> {
        let (est, score) = track_tip(frame, &self.template, self.estimate(), &self.config)?;
        self.estimate = [est.x, est.y];
        self.last_score = score;
        let moved = (est - Vec2::new(self.cut_at[0], self.cut_at[1])).norm();
        if self.config.refresh_distance_px.is_some_and(|d| moved > d) {
            // keep the old template if the new one would fall off the frame
            if let Ok(t) = acquire_template(&prepare(frame, &self.config), est, self.config.template_size) {
                self.template = t;
                self.cut_at = self.estimate;
            }
        }
        Ok(est)
    }
}
