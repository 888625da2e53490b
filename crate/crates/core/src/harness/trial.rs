//! Single trials: goal selection, execution and metrics recovered from the log.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::SandboxConfig;
use crate::autonomy::{Episode, EpisodeLog, EpisodeSetup, SurgicalState};
use crate::error::{Error, Result};
use crate::microscope::Calibration;
use crate::perception::puncture::PunctureModel;
use crate::scene::{EyeScene, Vec2, Vec3};

/// Where a trial starts and what the operator clicks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub vein: usize,
    /// Integer pixel the operator clicks.
    pub goal_px: [f64; 2],
    pub goal_um: [f64; 2],
    pub start_tip: [f64; 3],
}

/// Picks a clickable goal on a vein and a starting tip position above the retina.
pub fn plan_trial<R: Rng>(scene: &EyeScene, cal: &Calibration, cfg: &SandboxConfig, rng: &mut R) -> Result<TrialPlan> {
    let h = &cfg.harness;
    let m = &cfg.microscope;
    let margin_px = cal.px_from_um(h.fov_margin_um);
    let in_view = |px: Vec2| {
        px.x >= margin_px && px.y >= margin_px && px.x <= m.width as f64 - 1.0 - margin_px && px.y <= m.height as f64 - 1.0 - margin_px
    };

    for _ in 0..2000 {
        let vi = rng.random_range(0..scene.veins.len());
        let vein = &scene.veins[vi];
        let len = vein.arc_length();
        if len <= 2.0 * h.goal_end_clearance_um {
            continue;
        }
        let s = rng.random_range(h.goal_end_clearance_um..len - h.goal_end_clearance_um);
        let px = cal.project(vein.point_at(s).xy());
        let px = Vec2::new(px.x.round(), px.y.round());
        if !in_view(px) {
            continue;
        }
        let xy = cal.unproject(px);
        if scene.vein_under(xy).map(|(i, _)| i) != Some(vi) || vein.closest(xy).0 > 0.5 * vein.radius {
            continue;
        }
        let crowded = scene
            .veins
            .iter()
            .enumerate()
            .any(|(j, v)| j != vi && v.closest(xy).0 < v.radius + h.goal_vein_clearance_um);
        if crowded {
            continue;
        }
        let ends = [vein.centerline[0].xy(), vein.centerline[vein.centerline.len() - 1].xy()];
        if ends.iter().any(|e| (e - xy).norm() < h.goal_end_clearance_um) {
            continue;
        }
        for _ in 0..50 {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let [lo, hi] = h.start_distance_um;
            let d = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let start = xy + Vec2::new(angle.cos(), angle.sin()) * d;
            if in_view(cal.project(start)) {
                return Ok(TrialPlan {
                    vein: vi,
                    goal_px: [px.x, px.y],
                    goal_um: [xy.x, xy.y],
                    start_tip: [start.x, start.y, scene.retina_plane_z + h.start_height_um],
                });
            }
        }
    }
    Err(Error::Config(format!("scene {} has no goal satisfying the placement margins", scene.seed)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub scene_seed: u64,
    pub trial_seed: u64,
    pub success: bool,
    pub final_state: SurgicalState,
    pub failure: Option<String>,
    /// Ground-truth tip at the contact-detection frame against the clicked goal.
    pub xy_error_um: Option<f64>,
    /// Time at which the hold phase begins.
    pub duration_s: Option<f64>,
    /// Robot z at the first true contact frame minus robot z at detection.
    pub contact_delay_um: Option<f64>,
    /// Robot z at the first punctured frame minus robot z at detection.
    pub puncture_delay_um: Option<f64>,
    pub path_length_um: f64,
    pub max_rcm_residual_um: f64,
    pub frames: usize,
}

/// Recomputes every metric from the per-frame records alone.
pub fn metrics_from_log(log: &EpisodeLog) -> Result<TrialMetrics> {
    let frames = &log.frames;
    if frames.is_empty() {
        return Err(Error::Contract("episode log has no frames".into()));
    }
    let final_state = log.final_state().expect("non-empty");
    let damage = frames.iter().any(|f| f.flags.tissue_damage);
    let failure = if final_state == SurgicalState::Done && !damage {
        None
    } else {
        Some(
            frames
                .iter()
                .rev()
                .find_map(|f| f.fault.clone())
                .unwrap_or_else(|| format!("ended in {final_state:?}")),
        )
    };

    let contact_at = log.event_frame("ContactDetected");
    let xy_error_um = match (contact_at, log.header.goal_px) {
        (Some(k), Some(px)) => {
            let goal = log.header.calibration.unproject(Vec2::from(px));
            let tip = Vec3::from(frames[k].tip_gt).xy();
            Some((tip - goal).norm())
        }
        _ => None,
    };
    let duration_s = frames
        .iter()
        .position(|f| f.state == SurgicalState::Hold)
        .map(|k| frames[k].t);

    let z_delay = |truth: Option<usize>, detected: Option<usize>| match (truth, detected) {
        (Some(c), Some(d)) => Some(frames[c].robot[2] - frames[d].robot[2]),
        _ => None,
    };
    let first_contact = frames.iter().position(|f| f.flags.in_contact || f.flags.punctured);
    let first_puncture = frames.iter().position(|f| f.flags.punctured);
    let contact_delay_um = z_delay(first_contact, contact_at);
    let puncture_delay_um = z_delay(first_puncture, log.event_frame("PunctureDetected"));

    let path_length_um = frames
        .windows(2)
        .map(|w| (Vec3::from(w[1].robot) - Vec3::from(w[0].robot)).norm())
        .sum();
    let max_rcm_residual_um = frames.iter().filter_map(|f| f.mpc.as_ref()).map(|m| m.max_rcm_residual).fold(0.0, f64::max);

    Ok(TrialMetrics {
        scene_seed: log.header.scene_seed,
        trial_seed: log.header.trial_seed,
        success: failure.is_none(),
        final_state,
        failure,
        xy_error_um,
        duration_s,
        contact_delay_um,
        puncture_delay_um,
        path_length_um,
        max_rcm_residual_um,
        frames: frames.len(),
    })
}

pub struct TrialResult {
    pub plan: TrialPlan,
    pub log: EpisodeLog,
    pub metrics: TrialMetrics,
}

/// The plan a trial seed produces.
pub fn plan_for_seed(scene: &EyeScene, cfg: &SandboxConfig, trial_seed: u64) -> Result<TrialPlan> {
    let cal = cfg.microscope.calibration(scene.px_per_mm)?;
    plan_trial(scene, &cal, cfg, &mut ChaCha8Rng::seed_from_u64(trial_seed))
}

/// Builds the episode for a trial without running it.
pub fn prepare_trial(
    scene: &EyeScene,
    cfg: &SandboxConfig,
    model: Option<Arc<PunctureModel>>,
    trial_seed: u64,
) -> Result<(TrialPlan, Episode)> {
    let plan = plan_for_seed(scene, cfg, trial_seed)?;
    let setup = EpisodeSetup {
        scene: scene.clone(),
        start_tip: Vec3::from(plan.start_tip),
        goal_px: Some(plan.goal_px),
        trial_seed,
        config_digest: cfg.digest()?,
    };
    let episode = Episode::new(setup, cfg.autonomy.clone(), &cfg.microscope, model)?;
    Ok((plan, episode))
}

/// Runs one autonomous trial to a terminal state.
pub fn run_trial(
    scene: &EyeScene,
    cfg: &SandboxConfig,
    model: Option<Arc<PunctureModel>>,
    trial_seed: u64,
) -> Result<TrialResult> {
    let (plan, mut episode) = prepare_trial(scene, cfg, model, trial_seed)?;
    episode.run()?;
    let log = episode.into_log();
    let metrics = metrics_from_log(&log)?;
    Ok(TrialResult { plan, log, metrics })
}
