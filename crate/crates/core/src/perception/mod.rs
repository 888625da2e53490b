//! Image-based perception: template matching, contact detection, tip
//! tracking and the learned puncture detector.

pub mod contact;
pub mod ncc;
pub mod puncture;
pub mod tracking;

pub use contact::{
    calibrate_gamma, detect_contact, ncc_percent_change, ContactConfig, ContactDetectorState, GammaCalibration,
    GammaSearch, LoweringEpisode,
};
pub use ncc::{acquire_template, ncc_map, ncc_map_region, NccResult, Template};
pub use tracking::{track_tip, TipTracker, TrackerConfig};
