//! Checks applied to every control before it reaches the simulator,
//! whether it came from the planner or from the operator.

use serde::{Deserialize, Serialize};

use super::mpc::Workspace;
use crate::error::{Error, Result};
use crate::scene::{rcm_residual, shaft_from_tip, NeedleState, Vec3};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub speed_clamped: bool,
    pub workspace_clamped: bool,
    pub rcm_blocked: bool,
    pub non_finite: bool,
}

impl SafetyReport {
    pub fn intervened(&self) -> bool {
        self.speed_clamped || self.workspace_clamped || self.rcm_blocked || self.non_finite
    }

    pub fn describe(&self) -> Option<String> {
        let mut parts = Vec::new();
        if self.non_finite {
            parts.push("non-finite control zeroed");
        }
        if self.speed_clamped {
            parts.push("speed clamped");
        }
        if self.workspace_clamped {
            parts.push("workspace clamped");
        }
        if self.rcm_blocked {
            parts.push("rcm violation blocked");
        }
        (!parts.is_empty()).then(|| parts.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyLimits {
    pub max_speed: f64,
    pub workspace: Workspace,
    pub rcm_tolerance_um: f64,
    pub dt: f64,
}

/// Clamps speed, keeps the commanded position inside the workspace and
/// refuses motion that would break the remote centre of motion.
pub fn safety_filter(control: &Vec3, state: &NeedleState, entry: &Vec3, limits: &SafetyLimits) -> (Vec3, SafetyReport) {
    let mut report = SafetyReport::default();
    if !control.iter().all(|v| v.is_finite()) {
        report.non_finite = true;
        return (Vec3::zeros(), report);
    }
    let mut u = *control;
    let speed = u.norm();
    if speed > limits.max_speed {
        u *= limits.max_speed / speed;
        report.speed_clamped = true;
    }
    let frac = limits.workspace.admissible_fraction(&state.robot, &(u * limits.dt));
    if frac < 1.0 {
        u *= frac;
        report.workspace_clamped = true;
    }
    let next_tip = state.tip + u * limits.dt;
    let rcm_ok = shaft_from_tip(&next_tip, entry)
        .and_then(|d| rcm_residual(&next_tip, &d, entry))
        .is_ok_and(|r| r <= limits.rcm_tolerance_um);
    if !rcm_ok {
        report.rcm_blocked = true;
        u = Vec3::zeros();
    }
    (u, report)
}

/// Operator velocity: normalized axes scaled by the pedal gain and the speed limit.
pub fn teleop_velocity(axes: [f64; 3], pedal: f64, max_speed: f64) -> Result<Vec3> {
    if !axes.iter().all(|a| a.is_finite() && (-1.0..=1.0).contains(a)) {
        return Err(Error::Contract(format!("teleop axes {axes:?} outside [-1, 1]")));
    }
    if !(0.0..=1.0).contains(&pedal) {
        return Err(Error::Contract(format!("pedal gain {pedal} outside [0, 1]")));
    }
    Ok(Vec3::from(axes) * pedal * max_speed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::PhaseFlags;
    use proptest::prelude::*;

    fn state(p: Vec3) -> NeedleState {
        let entry = Vec3::new(-9000.0, 0.0, 7000.0);
        NeedleState {
            tip: p,
            robot: p,
            shaft_dir: shaft_from_tip(&p, &entry).unwrap(),
            elbow_angle_deg: 45.0,
            deflection: 0.0,
            flags: PhaseFlags::default(),
            lumen_offset: Vec3::zeros(),
            contact_vein: None,
            contact_seen: false,
        }
    }

    fn limits() -> SafetyLimits {
        SafetyLimits {
            max_speed: 500.0,
            workspace: Workspace { min: [-4000.0, -4000.0, 10.0], max: [4000.0, 4000.0, 8000.0] },
            rcm_tolerance_um: 1.0,
            dt: 1.0 / 30.0,
        }
    }

    #[test]
    fn teleop_products() {
        assert_eq!(teleop_velocity([0.0, 0.0, -1.0], 0.5, 500.0).unwrap(), Vec3::new(0.0, 0.0, -250.0));
        assert_eq!(teleop_velocity([1.0, -1.0, 1.0], 0.0, 500.0).unwrap(), Vec3::zeros());
        assert!(teleop_velocity([1.5, 0.0, 0.0], 0.5, 500.0).is_err());
        assert!(teleop_velocity([0.0, 0.0, 0.0], 1.2, 500.0).is_err());
    }

    #[test]
    fn floor_clamps_descent() {
        let entry = Vec3::new(-9000.0, 0.0, 7000.0);
        let (u, r) = safety_filter(&Vec3::new(0.0, 0.0, -500.0), &state(Vec3::new(0.0, 0.0, 12.0)), &entry, &limits());
        assert!(r.workspace_clamped && !r.speed_clamped);
        assert!((u.z * limits().dt + 2.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn filtered_controls_respect_limits(
            ux in -5e4f64..5e4, uy in -5e4f64..5e4, uz in -5e4f64..5e4,
            px in -3900.0f64..3900.0, py in -3900.0f64..3900.0, pz in 10.0f64..3000.0,
        ) {
            let entry = Vec3::new(-9000.0, 0.0, 7000.0);
            let s = state(Vec3::new(px, py, pz));
            let l = limits();
            let (u, _) = safety_filter(&Vec3::new(ux, uy, uz), &s, &entry, &l);
            prop_assert!(u.norm() <= l.max_speed * (1.0 + 1e-12));
            prop_assert!(l.workspace.contains(&(s.robot + u * l.dt), 1e-9));
        }
    }
}
