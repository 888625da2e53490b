//! Image-based servoing of the tip onto the clicked goal.

use super::fsm::SurgicalState;
use super::mpc::{build_mpc, solve_mpc, MpcConfig, Trajectory, Workspace};
use crate::error::Result;
use crate::microscope::Calibration;
use crate::scene::{NeedleState, Vec2, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct ServoOutput {
    pub control: Vec3,
    pub aligned: bool,
    pub pixel_error: f64,
    pub trajectory: Option<Trajectory>,
}

/// Plans a planar move that cancels the pixel error between tip and goal.
/// Within `align_tolerance_px` it stops and reports alignment instead.
#[allow(clippy::too_many_arguments)]
pub fn servo_step(
    tip_px: Vec2,
    goal_px: Vec2,
    state: &NeedleState,
    entry: &Vec3,
    cal: &Calibration,
    max_speed: f64,
    workspace: Workspace,
    align_tolerance_px: f64,
    mpc: &MpcConfig,
) -> Result<ServoOutput> {
    let err_px = goal_px - tip_px;
    let pixel_error = err_px.norm();
    if pixel_error <= align_tolerance_px {
        return Ok(ServoOutput { control: Vec3::zeros(), aligned: true, pixel_error, trajectory: None });
    }
    let goal = state.robot + Vec3::new(cal.um_from_px(err_px.x), cal.um_from_px(err_px.y), 0.0);
    let problem = build_mpc(SurgicalState::NavigatePlanar, state, entry, &goal, max_speed, workspace, mpc)?;
    let traj = solve_mpc(&problem)?;
    Ok(ServoOutput { control: traj.controls[0], aligned: false, pixel_error, trajectory: Some(traj) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{shaft_from_tip, PhaseFlags};

    fn setup() -> (NeedleState, Vec3, Workspace) {
        let entry = Vec3::new(-9000.0, 0.0, 7000.0);
        let p = Vec3::new(0.0, 0.0, 800.0);
        let s = NeedleState {
            tip: p,
            robot: p,
            shaft_dir: shaft_from_tip(&p, &entry).unwrap(),
            elbow_angle_deg: 45.0,
            deflection: 0.0,
            flags: PhaseFlags::default(),
            lumen_offset: Vec3::zeros(),
            contact_vein: None,
            contact_seen: false,
        };
        (s, entry, Workspace { min: [-4000.0, -4000.0, 10.0], max: [4000.0, 4000.0, 8000.0] })
    }

    #[test]
    fn zero_error_is_aligned() {
        let (s, e, ws) = setup();
        let px = Vec2::new(320.0, 240.0);
        let out = servo_step(px, px, &s, &e, &Calibration::default(), 500.0, ws, 1.0, &MpcConfig::default()).unwrap();
        assert!(out.aligned);
        assert_eq!(out.control, Vec3::zeros());
    }

    #[test]
    fn goal_east_moves_east() {
        let (s, e, ws) = setup();
        let out = servo_step(
            Vec2::new(320.0, 240.0),
            Vec2::new(330.0, 240.0),
            &s,
            &e,
            &Calibration::default(),
            500.0,
            ws,
            1.0,
            &MpcConfig::default(),
        )
        .unwrap();
        assert!(!out.aligned);
        let angle = out.control.y.atan2(out.control.x).to_degrees().abs();
        assert!(angle < 5.0 && out.control.x > 0.0 && out.control.z == 0.0);
    }
}
