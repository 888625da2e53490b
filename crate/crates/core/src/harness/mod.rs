//! Trials, campaigns, datasets and reports built on the autonomy engine.

pub mod campaign;
pub mod config;
pub mod datasets;
pub mod plots;
pub mod trial;

pub use campaign::{run_campaign, Aggregate, CampaignConfig, CampaignReport, Stat};
pub use config::{HarnessConfig, SandboxConfig};
pub use datasets::{load_clips, lowering_episodes, puncture_clips, save_clips, ClipSpec, LoweringSpec};
pub use plots::{emit_delay_histograms, emit_plots, velocity_profile, VelocitySample};
pub use trial::{metrics_from_log, plan_for_seed, plan_trial, prepare_trial, run_trial, TrialMetrics, TrialPlan, TrialResult};

use std::path::Path;

use crate::autonomy::EpisodeLog;
use crate::error::Result;

/// Loads a saved episode and recomputes its metrics.
pub fn replay(path: &Path) -> Result<(EpisodeLog, TrialMetrics)> {
    let log = EpisodeLog::load(path)?;
    let metrics = metrics_from_log(&log)?;
    Ok((log, metrics))
}
