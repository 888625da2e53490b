//! Needle-vein contact from the drop of the peak NCC score.
//!
//! A template of the needle is cut when the descent starts. As the needle
//! presses on the vein it bends at the elbow, and the best match against the
//! template degrades; contact is declared once the relative drop
//! `f = (max0 - max_t) / max0` reaches the threshold gain `gamma`.

use serde::{Deserialize, Serialize};

use super::ncc::{acquire_template, ncc_map_region, NccResult, Template};
use crate::error::{Error, Result};
use crate::microscope::Frame;
use crate::scene::Vec2;

pub const DEFAULT_GAMMA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactConfig {
    pub gamma: f64,
    pub template_size: [usize; 2],
    /// Half-width of the offset window searched around the template's origin.
    pub search_radius: i64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA, template_size: [32, 32], search_radius: 6 }
    }
}

/// Relative drop of the peak NCC score.
pub fn percent_change(max_t0: f64, max_t: f64) -> Result<f64> {
    if !(max_t0 > 0.0) {
        return Err(Error::Calibration(format!(
            "initial peak NCC {max_t0} is not positive; re-acquire the template"
        )));
    }
    Ok((max_t0 - max_t) / max_t0)
}

pub fn ncc_percent_change(ncc_t0: &NccResult, ncc_t: &NccResult) -> Result<f64> {
    percent_change(ncc_t0.max_score, ncc_t.max_score)
}

/// Per-episode contact detector. Once triggered it stays triggered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactDetectorState {
    pub template: Template,
    pub ncc_t0_max: f64,
    pub gamma: f64,
    pub triggered: bool,
    pub search_radius: i64,
}

impl ContactDetectorState {
    /// Cuts the template at the start of the descent and scores it against
    /// the same frame.
    pub fn arm(frame: &Frame, tip_px: Vec2, config: &ContactConfig) -> Result<Self> {
        if !(config.gamma > 0.0 && config.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", config.gamma)));
        }
        let template = acquire_template(frame, tip_px, config.template_size)?;
        let mut state = Self {
            template,
            ncc_t0_max: 1.0,
            gamma: config.gamma,
            triggered: false,
            search_radius: config.search_radius,
        };
        let ncc_t0 = state.score(frame)?;
        percent_change(ncc_t0.max_score, ncc_t0.max_score)?;
        state.ncc_t0_max = ncc_t0.max_score;
        Ok(state)
    }

    /// NCC over the search window around where the template was cut.
    pub fn score(&self, frame: &Frame) -> Result<NccResult> {
        let [ox, oy] = self.template.origin;
        let r = self.search_radius;
        ncc_map_region(frame, &self.template, [ox - r, ox + r], [oy - r, oy + r])
    }

    /// Scores `frame`, returning the percent change and the (latched) decision.
    pub fn observe(&mut self, frame: &Frame) -> Result<(f64, bool)> {
        let ncc = self.score(frame)?;
        let f = percent_change(self.ncc_t0_max, ncc.max_score)?;
        Ok((f, detect_contact(self, &ncc)?))
    }
}

/// Threshold test `f >= gamma`, latched for the rest of the episode.
pub fn detect_contact(state: &mut ContactDetectorState, ncc_t: &NccResult) -> Result<bool> {
    let f = percent_change(state.ncc_t0_max, ncc_t.max_score)?;
    if f >= state.gamma {
        state.triggered = true;
    }
    Ok(state.triggered)
}

/// Percent-change trace of one descent, with the ground-truth contact frame.
/// Index 0 is the frame the template was cut from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoweringEpisode {
    pub scores: Vec<f64>,
    pub contact_frame: usize,
    /// Robot z travel per frame during the descent.
    pub descent_step_um: f64,
}

impl LoweringEpisode {
    /// First frame (after the template frame) whose score reaches `gamma`.
    pub fn detection_frame(&self, gamma: f64) -> Option<usize> {
        self.scores.iter().skip(1).position(|&f| f >= gamma).map(|i| i + 1)
    }

    pub fn max_pre_contact(&self) -> f64 {
        self.scores[1..self.contact_frame.max(1)].iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GammaSearch {
    pub step: f64,
    /// Largest tolerated lag, in frames, between true contact and detection.
    pub delay_budget_frames: usize,
}

impl Default for GammaSearch {
    fn default() -> Self {
        Self { step: 0.01, delay_budget_frames: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaCalibration {
    pub gamma: f64,
    pub total_delay_frames: usize,
    pub delays: Vec<usize>,
    pub max_pre_contact_score: f64,
}

/// Grid search for the threshold gain.
///
/// A grid value is feasible when no episode triggers before its contact frame
/// and every episode triggers within the delay budget. Among feasible values
/// the one with the smallest total detection lag wins; ties go to the larger
/// gain.
pub fn calibrate_gamma(episodes: &[LoweringEpisode], search: &GammaSearch) -> Result<GammaCalibration> {
    if episodes.is_empty() {
        return Err(Error::Calibration("no lowering episodes supplied".into()));
    }
    for (i, e) in episodes.iter().enumerate() {
        if e.contact_frame == 0 || e.contact_frame >= e.scores.len() {
            return Err(Error::Calibration(format!(
                "episode {i}: contact frame {} outside the trace of {} frames",
                e.contact_frame,
                e.scores.len()
            )));
        }
    }
    if !(search.step > 0.0 && search.step < 1.0) {
        return Err(Error::Config(format!("grid step must lie in (0, 1), got {}", search.step)));
    }
    let steps = (1.0 / search.step).round() as usize;
    let max_pre = episodes.iter().map(LoweringEpisode::max_pre_contact).fold(0.0, f64::max);

    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for k in 1..steps {
        let gamma = k as f64 / steps as f64;
        let delays: Option<Vec<usize>> = episodes
            .iter()
            .map(|e| match e.detection_frame(gamma) {
                Some(d) if d >= e.contact_frame && d - e.contact_frame <= search.delay_budget_frames => {
                    Some(d - e.contact_frame)
                }
                _ => None,
            })
            .collect();
        if let Some(delays) = delays {
            let total: usize = delays.iter().sum();
            if best.as_ref().is_none_or(|(t, _, _)| total <= *t) {
                best = Some((total, gamma, delays));
            }
        }
    }

    match best {
        Some((total, gamma, delays)) => {
            Ok(GammaCalibration { gamma, total_delay_frames: total, delays, max_pre_contact_score: max_pre })
        }
        None => {
            let weakest = episodes
                .iter()
                .map(|e| {
                    let end = (e.contact_frame + search.delay_budget_frames + 1).min(e.scores.len());
                    e.scores[e.contact_frame..end].iter().copied().fold(f64::NEG_INFINITY, f64::max)
                })
                .fold(f64::INFINITY, f64::min);
            Err(Error::Calibration(format!(
                "no feasible gain: pre-contact scores reach {max_pre:.4} while the weakest episode only reaches \
                 {weakest:.4} within {} frames of contact",
                search.delay_budget_frames
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::ncc::NccResult;

    fn result(max: f64) -> NccResult {
        NccResult { heat_map: vec![max], map_width: 1, map_height: 1, map_origin: [0, 0], max_score: max, max_loc: [0, 0] }
    }

    fn state(gamma: f64) -> ContactDetectorState {
        ContactDetectorState {
            template: Template { patch: vec![0; 64], width: 8, height: 8, origin: [0, 0], anchor_px: [4.0, 4.0], t0: 0.0 },
            ncc_t0_max: 0.95,
            gamma,
            triggered: false,
            search_radius: 2,
        }
    }

    #[test]
    fn percent_change_examples() {
        assert_eq!(ncc_percent_change(&result(0.8), &result(0.8)).unwrap(), 0.0);
        assert!((ncc_percent_change(&result(0.95), &result(0.76)).unwrap() - 0.2).abs() < 1e-12);
        let up = ncc_percent_change(&result(0.9), &result(0.95)).unwrap();
        assert!((up - (-0.05 / 0.9)).abs() < 1e-12);
        assert!((up + 0.0556).abs() < 1e-4);
        assert!(matches!(ncc_percent_change(&result(0.0), &result(0.5)), Err(Error::Calibration(_))));
    }

    #[test]
    fn threshold_is_inclusive_and_latches() {
        let mut s = state(0.2);
        assert!(!detect_contact(&mut s, &result(0.95)).unwrap());
        let at_gamma = 0.95 * (1.0 - 0.2);
        let f = percent_change(0.95, at_gamma).unwrap();
        let mut s2 = state(f);
        assert!(detect_contact(&mut s2, &result(at_gamma)).unwrap());
        assert!(detect_contact(&mut s2, &result(0.95)).unwrap(), "stays latched");
    }

    fn episode(scores: &[f64], contact: usize) -> LoweringEpisode {
        LoweringEpisode { scores: scores.to_vec(), contact_frame: contact, descent_step_um: 13.3 }
    }

    #[test]
    fn single_clean_episode_prefers_largest_gain() {
        let e = episode(&[0.0, 0.0, 0.0, 0.5, 0.5, 0.5], 3);
        let c = calibrate_gamma(&[e], &GammaSearch::default()).unwrap();
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.delays, vec![0]);
    }

    #[test]
    fn infeasible_when_noise_exceeds_contact_signal() {
        let a = episode(&[0.0, 0.3, 0.1, 0.25, 0.25], 3);
        let b = episode(&[0.0, 0.05, 0.25, 0.25, 0.25], 2);
        let err = calibrate_gamma(&[a, b], &GammaSearch::default()).unwrap_err();
        assert!(matches!(err, Error::Calibration(_)));
    }

    #[test]
    fn gain_trades_lag_for_margin() {
        // a low gain detects one frame earlier on the second episode
        let a = episode(&[0.0, 0.01, 0.02, 0.4, 0.6], 3);
        let b = episode(&[0.0, 0.02, 0.15, 0.5, 0.6], 2);
        let c = calibrate_gamma(&[a, b], &GammaSearch::default()).unwrap();
        assert_eq!(c.gamma, 0.15);
        assert_eq!(c.total_delay_frames, 0);
    }

    proptest::proptest! {
        #[test]
        fn detection_frame_monotone_in_gamma(
            scores in proptest::collection::vec(0.0f64..1.0, 2..40),
            g1 in 0.01f64..0.99, g2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let e = episode(&scores, 1);
            match (e.detection_frame(lo), e.detection_frame(hi)) {
                (Some(a), Some(b)) => proptest::prop_assert!(a <= b),
                (None, Some(_)) => proptest::prop_assert!(false, "lower gain must detect if higher does"),
                _ => {}
            }
        }

        #[test]
        fn latch_never_releases(maxes in proptest::collection::vec(0.0f64..1.0, 1..30)) {
            let mut s = state(0.3);
            let mut seen = false;
            for m in maxes {
                let now = detect_contact(&mut s, &result(m)).unwrap();
                proptest::prop_assert!(!seen || now);
                seen |= now;
            }
        }

        #[test]
        fn self_change_is_zero(m in 1e-6f64..1.0) {
            proptest::prop_assert_eq!(ncc_percent_change(&result(m), &result(m)).unwrap(), 0.0);
        }
    }
}
