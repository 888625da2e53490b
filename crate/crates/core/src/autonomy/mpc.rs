//! Receding-horizon trajectory generation under remote-centre-of-motion
//! kinematics.
//!
//! The model is the commanded tip `x_{k+1} = x_k + u_k dt`; the shaft always
//! passes through the entry point, so the pose follows from the tip. The
//! control sequence is optimized by projected gradient descent: each control
//! is projected onto the phase's motion subspace and speed ball, and a forward
//! rollout shortens any step that would leave the workspace box.

use serde::{Deserialize, Serialize};

use super::fsm::SurgicalState;
use crate::error::{Error, Result};
use crate::scene::{rcm_residual, shaft_from_tip, NeedleState, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub w_track: f64,
    pub w_effort: f64,
    pub max_iterations: usize,
    /// Relative cost change below which the solver stops.
    pub rel_tolerance: f64,
    pub rcm_tolerance_um: f64,
    /// Largest constraint violation accepted on a returned trajectory.
    pub violation_tolerance: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            dt: 1.0 / 30.0,
            w_track: 1.0,
            w_effort: 1e-4,
            max_iterations: 100,
            rel_tolerance: 1e-6,
            rcm_tolerance_um: 1.0,
            violation_tolerance: 1e-6,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::Config("MPC horizon and dt must be positive".into()));
        }
        if self.w_track < 0.0 || self.w_effort < 0.0 {
            return Err(Error::Config("MPC weights must be non-negative".into()));
        }
        if !(self.rcm_tolerance_um > 0.0) {
            return Err(Error::Config("RCM tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Allowed direction set for the controls of one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionConstraint {
    /// Zero z velocity.
    Planar,
    /// Zero x and y velocity.
    Vertical,
    /// Velocity parallel to a unit direction.
    Axial { dir: [f64; 3] },
}

impl MotionConstraint {
    pub fn project(&self, u: &Vec3) -> Vec3 {
        match self {
            MotionConstraint::Planar => Vec3::new(u.x, u.y, 0.0),
            MotionConstraint::Vertical => Vec3::new(0.0, 0.0, u.z),
            MotionConstraint::Axial { dir } => {
                let d = Vec3::from(*dir);
                d * u.dot(&d)
            }
        }
    }

    /// Distance of `u` from the allowed subspace.
    pub fn residual(&self, u: &Vec3) -> f64 {
        (u - self.project(u)).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Workspace {
    pub fn contains(&self, p: &Vec3, slack: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - slack && p[i] <= self.max[i] + slack)
    }

    /// Distance outside the box (0 inside).
    pub fn violation(&self, p: &Vec3) -> f64 {
        (0..3).map(|i| (self.min[i] - p[i]).max(p[i] - self.max[i]).max(0.0)).fold(0.0, f64::max)
    }

    /// Largest `a` in `[0, 1]` keeping `from + a * step` inside the box.
    pub fn admissible_fraction(&self, from: &Vec3, step: &Vec3) -> f64 {
        let mut a: f64 = 1.0;
        for i in 0..3 {
            if step[i] > 0.0 {
                a = a.min(((self.max[i] - from[i]) / step[i]).max(0.0));
            } else if step[i] < 0.0 {
                a = a.min(((self.min[i] - from[i]) / step[i]).max(0.0));
            }
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcProblem {
    pub phase: SurgicalState,
    pub horizon: usize,
    pub dt: f64,
    pub initial: NeedleState,
    pub entry: [f64; 3],
    pub goal: [f64; 3],
    pub w_track: f64,
    pub w_effort: f64,
    pub max_speed: f64,
    pub rcm_tolerance_um: f64,
    pub constraint: MotionConstraint,
    pub workspace: Workspace,
    pub max_iterations: usize,
    pub rel_tolerance: f64,
    pub violation_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<NeedleState>,
    pub controls: Vec<Vec3>,
    pub cost: f64,
    pub cost_history: Vec<f64>,
    pub max_constraint_violation: f64,
    pub max_rcm_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Sets up the phase's problem. `goal` is the target for the commanded tip.
pub fn build_mpc(
    phase: SurgicalState,
    state: &NeedleState,
    entry: &Vec3,
    goal: &Vec3,
    max_speed: f64,
    workspace: Workspace,
    config: &MpcConfig,
) -> Result<MpcProblem> {
    config.validate()?;
    let constraint = match phase {
        SurgicalState::NavigatePlanar => MotionConstraint::Planar,
        SurgicalState::LowerZ => MotionConstraint::Vertical,
        SurgicalState::InsertAxial | SurgicalState::Retract => MotionConstraint::Axial { dir: state.shaft_dir.into() },
        other => return Err(Error::Contract(format!("no MPC problem for phase {other:?}"))),
    };
    if !(max_speed > 0.0) {
        return Err(Error::Config(format!("speed bound must be positive, got {max_speed}")));
    }
    Ok(MpcProblem {
        phase,
        horizon: config.horizon,
        dt: config.dt,
        initial: state.clone(),
        entry: (*entry).into(),
        goal: (*goal).into(),
        w_track: config.w_track,
        w_effort: config.w_effort,
        max_speed,
        rcm_tolerance_um: config.rcm_tolerance_um,
        constraint,
        workspace,
        max_iterations: config.max_iterations,
        rel_tolerance: config.rel_tolerance,
        violation_tolerance: config.violation_tolerance,
    })
}

impl MpcProblem {
    fn goal(&self) -> Vec3 {
        Vec3::from(self.goal)
    }

    /// Commanded positions `x_0 ..= x_N`.
    pub fn rollout(&self, controls: &[Vec3]) -> Vec<Vec3> {
        let mut xs = Vec::with_capacity(controls.len() + 1);
        xs.push(self.initial.robot);
        for u in controls {
            let last = *xs.last().expect("non-empty");
            xs.push(last + u * self.dt);
        }
        xs
    }

    pub fn cost(&self, controls: &[Vec3]) -> f64 {
        let g = self.goal();
        let xs = self.rollout(controls);
        let track: f64 = xs[1..].iter().map(|x| (x - g).norm_squared()).sum();
        let effort: f64 = controls.iter().map(|u| u.norm_squared()).sum();
        self.w_track * track + self.w_effort * effort
    }

    fn gradient(&self, controls: &[Vec3]) -> Vec<Vec3> {
        let g = self.goal();
        let xs = self.rollout(controls);
        let n = controls.len();
        let mut grad = vec![Vec3::zeros(); n];
        let mut tail = Vec3::zeros();
        for j in (0..n).rev() {
            tail += (xs[j + 1] - g) * (2.0 * self.w_track * self.dt);
            grad[j] = tail + controls[j] * (2.0 * self.w_effort);
        }
        grad
    }

    /// Per-step projection onto the motion subspace and speed ball, then a
    /// rollout that shortens steps leaving the workspace.
    pub fn make_feasible(&self, controls: &[Vec3]) -> Vec<Vec3> {
        let mut x = self.initial.robot;
        controls
            .iter()
            .map(|u| {
                let mut v = self.constraint.project(u);
                let s = v.norm();
                if s > self.max_speed {
                    v *= self.max_speed / s;
                }
                v *= self.workspace.admissible_fraction(&x, &(v * self.dt));
                x += v * self.dt;
                v
            })
            .collect()
    }

    fn violation(&self, controls: &[Vec3], xs: &[Vec3]) -> f64 {
        let per_control = controls
            .iter()
            .map(|u| self.constraint.residual(u).max(u.norm() - self.max_speed))
            .fold(0.0, f64::max);
        let per_state = xs[1..].iter().map(|x| self.workspace.violation(x)).fold(0.0, f64::max);
        per_control.max(per_state).max(0.0)
    }

    /// Pose of the needle along the plan; the tip keeps its offset from the
    /// commanded position.
    pub fn states(&self, xs: &[Vec3]) -> Result<Vec<NeedleState>> {
        let entry = Vec3::from(self.entry);
        let offset = self.initial.tip - self.initial.robot;
        xs.iter()
            .map(|x| {
                let mut s = self.initial.clone();
                s.robot = *x;
                s.tip = x + offset;
                s.shaft_dir = shaft_from_tip(&s.tip, &entry)?;
                Ok(s)
            })
            .collect()
    }

    /// Controls that head straight for the goal at the speed bound.
    fn greedy_start(&self) -> Vec<Vec3> {
        let g = self.goal();
        let mut x = self.initial.robot;
        let guess: Vec<Vec3> = (0..self.horizon)
            .map(|_| {
                let mut u = self.constraint.project(&((g - x) / self.dt));
                let s = u.norm();
                if s > self.max_speed {
                    u *= self.max_speed / s;
                }
                x += u * self.dt;
                u
            })
            .collect();
        self.make_feasible(&guess)
    }
}

/// Projected gradient with backtracking; every accepted iterate lowers the cost.
pub fn solve_mpc(p: &MpcProblem) -> Result<Trajectory> {
    if p.horizon == 0 || !(p.dt > 0.0) || !(p.rcm_tolerance_um > 0.0) {
        return Err(Error::Contract("malformed MPC problem".into()));
    }
    if !p.workspace.contains(&p.initial.robot, 1e-9) {
        return Err(Error::Infeasible(format!(
            "start {:?} lies {:.3} um outside the workspace",
            p.initial.robot.as_slice(),
            p.workspace.violation(&p.initial.robot)
        )));
    }
    let mut u = p.greedy_start();
    let mut cost = p.cost(&u);
    let mut history = vec![cost];
    let lipschitz = 2.0 * p.w_effort + p.w_track * p.dt * p.dt * (p.horizon * (p.horizon + 1)) as f64;
    let mut step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };
    let mut iterations = 0;
    let mut converged = cost == 0.0;

    while !converged && iterations < p.max_iterations {
        iterations += 1;
        let grad = p.gradient(&u);
        let mut accepted = None;
        let mut trial_step = step;
        for _ in 0..30 {
            let cand: Vec<Vec3> = u.iter().zip(&grad).map(|(a, g)| a - g * trial_step).collect();
            let cand = p.make_feasible(&cand);
            let c = p.cost(&cand);
            if c < cost {
                accepted = Some((cand, c));
                break;
            }
            trial_step *= 0.5;
        }
        match accepted {
            Some((cand, c)) => {
                let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                u = cand;
                cost = c;
                history.push(c);
                step = (trial_step * 2.0).min(4.0 / lipschitz.max(f64::MIN_POSITIVE));
                if rel < p.rel_tolerance {
                    converged = true;
                }
            }
            // no descent direction left within the feasible set
            None => converged = true,
        }
    }

    let xs = p.rollout(&u);
    let states = p.states(&xs)?;
    let entry = Vec3::from(p.entry);
    let max_rcm = states
        .iter()
        .map(|s| rcm_residual(&s.tip, &s.shaft_dir, &entry))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let violation = p.violation(&u, &xs).max(max_rcm - p.rcm_tolerance_um).max(0.0);
    Ok(Trajectory {
        states,
        controls: u,
        cost,
        cost_history: history,
        max_constraint_violation: violation,
        max_rcm_residual: max_rcm,
        iterations,
        converged,
    })
}
