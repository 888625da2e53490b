//! Closed-loop episode: render, perceive, apply events, plan, filter, step.
//!
//! A tick that changes the workflow state issues no motion; the new phase's
//! controller takes over on the next frame.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fsm::{next_state, SurgicalEvent, SurgicalState};
use super::log::{EpisodeLog, FrameRecord, LogHeader, MpcSummary};
use super::mpc::{build_mpc, solve_mpc, MpcConfig, Trajectory, Workspace};
use super::safety::{safety_filter, teleop_velocity, SafetyLimits};
use super::servo::servo_step;
use crate::error::{Error, Result};
use crate::microscope::{add_sensor_noise, Calibration, Frame, MicroscopeConfig, Renderer};
use crate::perception::contact::{ContactConfig, ContactDetectorState};
use crate::perception::puncture::{PunctureDetector, PunctureDetectorConfig, PunctureModel};
use crate::perception::tracking::{TipTracker, TrackerConfig};
use crate::scene::{step, EyeScene, NeedleState, Vec2, Vec3};

/// Where a perception signal comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    #[default]
    Vision,
    /// Ground truth on the frame it happens.
    Oracle,
    /// Ground truth reported a fixed number of frames late.
    Lagged { frames: usize },
}

impl Source {
    fn label(self) -> String {
        match self {
            Source::Vision => "vision".into(),
            Source::Oracle => "oracle".into(),
            Source::Lagged { frames } => format!("lagged{frames}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub tracking: Source,
    pub contact: Source,
    pub puncture: Source,
}

impl PerceptionConfig {
    pub fn vision() -> Self {
        Self::default()
    }

    pub fn oracle() -> Self {
        Self { tracking: Source::Oracle, contact: Source::Oracle, puncture: Source::Oracle }
    }

    pub fn describe(&self) -> String {
        format!(
            "tracking={} contact={} puncture={}",
            self.tracking.label(),
            self.contact.label(),
            self.puncture.label()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    #[default]
    Autonomous,
    RobotAssisted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutonomyConfig {
    pub dt: f64,
    pub mode: ControlMode,
    pub perception: PerceptionConfig,
    pub nav_speed_um_s: f64,
    pub lower_speed_um_s: f64,
    pub insert_speed_um_s: f64,
    pub retract_speed_um_s: f64,
    pub retract_distance_um: f64,
    pub retract_tolerance_um: f64,
    pub hold_s: f64,
    pub align_tolerance_px: f64,
    pub time_limit_s: f64,
    /// Axial travel after which an insertion without puncture is aborted.
    pub max_insertion_um: f64,
    /// Descent target relative to the retina plane.
    pub descent_target_um: f64,
    /// Lowest robot height, above the retina, before contact is known.
    pub approach_clearance_um: f64,
    /// Lowest robot height, relative to the retina, once in tissue.
    pub insertion_floor_um: f64,
    pub workspace_half_extent_um: f64,
    pub workspace_max_z_um: f64,
    pub safety_max_speed_um_s: f64,
    pub teleop_max_speed_um_s: f64,
    pub mpc: MpcConfig,
    pub contact: ContactConfig,
    pub tracker: TrackerConfig,
    pub puncture: PunctureDetectorConfig,
}

impl Default for AutonomyConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 30.0,
            mode: ControlMode::Autonomous,
            perception: PerceptionConfig::default(),
            nav_speed_um_s: 500.0,
            lower_speed_um_s: 400.0,
            insert_speed_um_s: 100.0,
            retract_speed_um_s: 200.0,
            retract_distance_um: 300.0,
            retract_tolerance_um: 0.5,
            hold_s: 3.0,
            align_tolerance_px: 1.0,
            time_limit_s: 60.0,
            max_insertion_um: 400.0,
            descent_target_um: -500.0,
            approach_clearance_um: 10.0,
            insertion_floor_um: -100.0,
            workspace_half_extent_um: 4000.0,
            workspace_max_z_um: 8000.0,
            safety_max_speed_um_s: 500.0,
            teleop_max_speed_um_s: 500.0,
            mpc: MpcConfig::default(),
            contact: ContactConfig::default(),
            tracker: TrackerConfig::default(),
            puncture: PunctureDetectorConfig::default(),
        }
    }
}

impl AutonomyConfig {
    pub fn validate(&self) -> Result<()> {
        self.mpc.validate()?;
        if (self.mpc.dt - self.dt).abs() > 1e-12 {
            return Err(Error::Config(format!("planner dt {} differs from control period {}", self.mpc.dt, self.dt)));
        }
        let speeds = [
            self.nav_speed_um_s,
            self.lower_speed_um_s,
            self.insert_speed_um_s,
            self.retract_speed_um_s,
            self.teleop_max_speed_um_s,
        ];
        if speeds.iter().any(|s| !(*s > 0.0 && *s <= self.safety_max_speed_um_s)) {
            return Err(Error::Config(format!(
                "phase speeds {speeds:?} must be positive and within the {} um/s safety limit",
                self.safety_max_speed_um_s
            )));
        }
        if !(self.retract_distance_um > 0.0 && self.max_insertion_um > 0.0 && self.hold_s >= 0.0) {
            return Err(Error::Config("retract distance and insertion travel must be positive".into()));
        }
        if !(self.align_tolerance_px > 0.0 && self.time_limit_s > 0.0) {
            return Err(Error::Config("alignment tolerance and time limit must be positive".into()));
        }
        if self.approach_clearance_um < 0.0 || self.insertion_floor_um > self.approach_clearance_um {
            return Err(Error::Config("insertion floor must lie below the approach clearance".into()));
        }
        Ok(())
    }
}

/// Operator input, queued and applied at the start of the next tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Command {
    ClickGoal { px: [f64; 2] },
    SetMode { mode: ControlMode },
    Teleop { axes: [f64; 3], pedal: f64 },
    Abort,
}

#[derive(Debug, Clone)]
pub struct EpisodeSetup {
    pub scene: EyeScene,
    pub start_tip: Vec3,
    /// Goal clicked before the first frame.
    pub goal_px: Option<[f64; 2]>,
    pub trial_seed: u64,
    pub config_digest: String,
}

pub struct TickOutput {
    pub frame: Frame,
    pub record: FrameRecord,
}

#[derive(Default)]
struct Signals {
    ncc_max: Option<f64>,
    f: Option<f64>,
    y_hat: Option<f64>,
    faults: Vec<String>,
}

pub struct Episode {
    scene: EyeScene,
    renderer: Renderer,
    noise_sigma: f64,
    config: AutonomyConfig,
    model: Option<Arc<PunctureModel>>,
    rng: ChaCha8Rng,
    sim: NeedleState,
    frame_index: usize,
    state: SurgicalState,
    mode: ControlMode,
    goal_px: Option<Vec2>,
    tip_est: Option<Vec2>,
    tracker: Option<TipTracker>,
    contact: Option<ContactDetectorState>,
    puncture: Option<PunctureDetector>,
    contact_detected: bool,
    puncture_detected: bool,
    gt_contact_frame: Option<usize>,
    gt_puncture_frame: Option<usize>,
    phase_origin: Vec3,
    phase_dir: Vec3,
    phase_start_t: f64,
    teleop: Vec3,
    teleop_latched: bool,
    assist_descending: bool,
    pending: VecDeque<Command>,
    log: EpisodeLog,
}

impl Episode {
    pub fn new(
        setup: EpisodeSetup,
        config: AutonomyConfig,
        microscope: &MicroscopeConfig,
        model: Option<Arc<PunctureModel>>,
    ) -> Result<Self> {
        config.validate()?;
        microscope.validate()?;
        setup.scene.validate()?;
        if config.perception.puncture == Source::Vision && model.is_none() {
            return Err(Error::Config("vision puncture detection needs a trained model".into()));
        }
        if (microscope.frame_rate_hz * config.dt - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "camera rate {} Hz does not match the control period {} s",
                microscope.frame_rate_hz, config.dt
            )));
        }
        let renderer = Renderer::new(&setup.scene, microscope)?;
        let sim = NeedleState::at_rest(&setup.scene, setup.start_tip)?;
        let header = LogHeader {
            scene_seed: setup.scene.seed,
            trial_seed: setup.trial_seed,
            goal_px: setup.goal_px,
            calibration: *renderer.calibration(),
            dt: config.dt,
            perception: config.perception.describe(),
            config_digest: setup.config_digest.clone(),
        };
        let mut ep = Self {
            renderer,
            noise_sigma: microscope.noise_sigma,
            model,
            rng: ChaCha8Rng::seed_from_u64(setup.trial_seed),
            phase_origin: sim.robot,
            phase_dir: sim.shaft_dir,
            sim,
            frame_index: 0,
            state: SurgicalState::AwaitGoal,
            mode: config.mode,
            goal_px: None,
            tip_est: None,
            tracker: None,
            contact: None,
            puncture: None,
            contact_detected: false,
            puncture_detected: false,
            gt_contact_frame: None,
            gt_puncture_frame: None,
            phase_start_t: 0.0,
            teleop: Vec3::zeros(),
            teleop_latched: false,
            assist_descending: false,
            pending: VecDeque::new(),
            log: EpisodeLog { header, frames: Vec::new() },
            config,
            scene: setup.scene,
        };
        if let Some(px) = setup.goal_px {
            ep.submit(Command::ClickGoal { px })?;
        }
        Ok(ep)
    }

    pub fn state(&self) -> SurgicalState {
        self.state
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn needle(&self) -> &NeedleState {
        &self.sim
    }

    pub fn scene(&self) -> &EyeScene {
        &self.scene
    }

    pub fn calibration(&self) -> &Calibration {
        self.renderer.calibration()
    }

    pub fn tip_estimate(&self) -> Option<Vec2> {
        self.tip_est
    }

    pub fn log(&self) -> &EpisodeLog {
        &self.log
    }

    pub fn into_log(self) -> EpisodeLog {
        self.log
    }

    pub fn is_finished(&self) -> bool {
        self.state.is_terminal()
    }

    pub fn time(&self) -> f64 {
        self.frame_index as f64 * self.config.dt
    }

    /// Checks a command against the current state, as modified by commands
    /// already queued, and queues it.
    pub fn submit(&mut self, cmd: Command) -> Result<()> {
        let queued_goal = self.pending.iter().any(|c| matches!(c, Command::ClickGoal { .. }));
        let mode = self
            .pending
            .iter()
            .rev()
            .find_map(|c| match c {
                Command::SetMode { mode } => Some(*mode),
                _ => None,
            })
            .unwrap_or(self.mode);
        match cmd {
            Command::ClickGoal { px } => {
                if self.state != SurgicalState::AwaitGoal || queued_goal {
                    return Err(Error::Rejected(format!("goal clicks are only accepted in AwaitGoal, now {:?}", self.state)));
                }
                if mode != ControlMode::Autonomous {
                    return Err(Error::Rejected("goal clicks need autonomous mode".into()));
                }
                let cfg = self.renderer.config();
                let inside = px.iter().all(|v| v.is_finite())
                    && px[0] >= 0.0
                    && px[1] >= 0.0
                    && px[0] <= (cfg.width - 1) as f64
                    && px[1] <= (cfg.height - 1) as f64;
                if !inside {
                    return Err(Error::Rejected(format!("goal {px:?} lies outside the {}x{} frame", cfg.width, cfg.height)));
                }
            }
            Command::Teleop { axes, pedal } => {
                if mode != ControlMode::RobotAssisted {
                    return Err(Error::Rejected("teleoperation needs robot-assisted mode".into()));
                }
                teleop_velocity(axes, pedal, self.config.teleop_max_speed_um_s)
                    .map_err(|e| Error::Rejected(e.to_string()))?;
            }
            Command::SetMode { mode: to } => {
                if to == ControlMode::Autonomous && mode != to && self.state != SurgicalState::AwaitGoal {
                    return Err(Error::Rejected("autonomy can only resume before a goal is set".into()));
                }
            }
            Command::Abort => {}
        }
        self.pending.push_back(cmd);
        Ok(())
    }

    /// Runs until a terminal state.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.tick()?;
        }
        Ok(())
    }

    pub fn tick(&mut self) -> Result<TickOutput> {
        let t = self.time();
        let k = self.frame_index;
        let mut frame = self.renderer.render(&self.sim, t);
        add_sensor_noise(&mut frame, self.noise_sigma, &mut self.rng);
        if self.sim.contact_seen && self.gt_contact_frame.is_none() {
            self.gt_contact_frame = Some(k);
        }
        if self.sim.flags.punctured && self.gt_puncture_frame.is_none() {
            self.gt_puncture_frame = Some(k);
        }

        let start_state = self.state;
        let mut events = Vec::new();
        let mut signals = Signals::default();

        let cmd_events = self.apply_commands();
        self.apply_events(&cmd_events);
        events.extend(cmd_events);

        if !self.state.is_terminal() {
            let perceived = self.perceive(&frame, &mut signals)?;
            self.apply_events(&perceived);
            events.extend(perceived);
        }

        let mut control = Vec3::zeros();
        let mut mpc = None;
        let mut teleop = false;
        if !self.state.is_terminal() {
            match self.mode {
                ControlMode::Autonomous if self.state == start_state => match self.plan() {
                    Ok(Some((u, summary))) => {
                        control = u;
                        mpc = Some(summary);
                    }
                    Ok(None) => {}
                    Err(Error::Infeasible(msg)) => {
                        signals.faults.push(format!("planner: {msg}"));
                        self.apply_events(&[SurgicalEvent::Abort]);
                        events.push(SurgicalEvent::Abort);
                    }
                    Err(e) => return Err(e),
                },
                ControlMode::RobotAssisted if !self.teleop_latched => {
                    control = self.teleop;
                    teleop = true;
                }
                _ => {}
            }
        }

        let limits = SafetyLimits {
            max_speed: self.config.safety_max_speed_um_s,
            workspace: self.workspace(),
            rcm_tolerance_um: self.config.mpc.rcm_tolerance_um,
            dt: self.config.dt,
        };
        let (control, report) = safety_filter(&control, &self.sim, &self.scene.entry_point, &limits);

        let record = FrameRecord {
            frame: k,
            t,
            state: self.state,
            events,
            tip_gt: self.sim.tip.into(),
            tip_gt_px: self.renderer.tip_px(&self.sim).into(),
            robot: self.sim.robot.into(),
            tip_est_px: self.tip_est.map(Into::into),
            control: control.into(),
            ncc_max: signals.ncc_max,
            f: signals.f,
            y_hat: signals.y_hat,
            flags: self.sim.flags,
            deflection: self.sim.deflection,
            teleop,
            mpc,
            safety: report.describe(),
            fault: (!signals.faults.is_empty()).then(|| signals.faults.join("; ")),
        };
        self.log.frames.push(record.clone());

        self.sim = step(&self.scene, &self.sim, &control, self.config.dt)?.0;
        self.frame_index += 1;
        Ok(TickOutput { frame, record })
    }

    fn apply_commands(&mut self) -> Vec<SurgicalEvent> {
        let mut events = Vec::new();
        while let Some(cmd) = self.pending.pop_front() {
            match cmd {
                Command::ClickGoal { px } => {
                    if self.state == SurgicalState::AwaitGoal {
                        self.goal_px = Some(Vec2::from(px));
                        events.push(SurgicalEvent::GoalClicked { px });
                    }
                }
                Command::SetMode { mode } => {
                    if mode != self.mode {
                        self.mode = mode;
                        self.teleop = Vec3::zeros();
                        self.teleop_latched = false;
                        self.assist_descending = false;
                    }
                }
                Command::Teleop { axes, pedal } => {
                    let v = teleop_velocity(axes, pedal, self.config.teleop_max_speed_um_s).unwrap_or_else(|_| Vec3::zeros());
                    if v == Vec3::zeros() {
                        self.teleop_latched = false;
                    }
                    if v.x != 0.0 || v.y != 0.0 {
                        self.assist_descending = false;
                    } else if v.z < 0.0 {
                        self.assist_descending = true;
                    }
                    self.teleop = v;
                }
                Command::Abort => events.push(SurgicalEvent::Abort),
            }
        }
        events
    }

    fn apply_events(&mut self, events: &[SurgicalEvent]) {
        for e in events {
            match e {
                SurgicalEvent::ContactDetected => self.contact_detected = true,
                SurgicalEvent::PunctureDetected => self.puncture_detected = true,
                _ => {}
            }
            if self.mode == ControlMode::RobotAssisted
                && matches!(e, SurgicalEvent::ContactDetected | SurgicalEvent::PunctureDetected)
            {
                self.teleop_latched = true;
            }
            let next = next_state(self.state, *e);
            if next != self.state {
                self.state = next;
                self.phase_origin = self.sim.robot;
                self.phase_dir = self.sim.shaft_dir;
                self.phase_start_t = self.time();
            }
        }
    }

    /// Which detectors run this tick: (tracking, contact, puncture).
    fn wanted(&self) -> (bool, bool, bool) {
        use SurgicalState as S;
        match self.mode {
            ControlMode::Autonomous => (
                matches!(self.state, S::AwaitGoal | S::NavigatePlanar),
                self.state == S::LowerZ,
                self.state == S::InsertAxial,
            ),
            ControlMode::RobotAssisted => (
                !self.contact_detected,
                !self.contact_detected && self.assist_descending,
                self.contact_detected && !self.puncture_detected,
            ),
        }
    }

    fn perceive(&mut self, frame: &Frame, signals: &mut Signals) -> Result<Vec<SurgicalEvent>> {
        let k = self.frame_index;
        let (want_track, want_contact, want_puncture) = self.wanted();
        let mut events = Vec::new();

        if want_track {
            match self.config.perception.tracking {
                Source::Vision => match self.tracker.as_mut() {
                    None => {
                        // the starting tip position is known from the setup
                        let px = self.renderer.tip_px(&self.sim);
                        self.tracker = Some(TipTracker::new(frame, px, &self.config.tracker)?);
                        self.tip_est = Some(px);
                    }
                    Some(tracker) => match tracker.update(frame) {
                        Ok(px) => self.tip_est = Some(px),
                        Err(e) => {
                            signals.faults.push(e.to_string());
                            events.push(SurgicalEvent::TrackingLost);
                        }
                    },
                },
                _ => self.tip_est = Some(self.renderer.tip_px(&self.sim)),
            }
        }

        if self.mode == ControlMode::Autonomous && self.state == SurgicalState::NavigatePlanar {
            if let (Some(goal), Some(est)) = (self.goal_px, self.tip_est) {
                if (goal - est).norm() <= self.config.align_tolerance_px {
                    events.push(SurgicalEvent::AlignedXY);
                }
            }
        }

        if want_contact {
            match self.config.perception.contact {
                Source::Vision => {
                    let center = self.tip_est.unwrap_or_else(|| self.renderer.tip_px(&self.sim));
                    match self.contact.as_mut() {
                        None => self.contact = Some(ContactDetectorState::arm(frame, center, &self.config.contact)?),
                        Some(det) => {
                            let (f, hit) = det.observe(frame)?;
                            signals.f = Some(f);
                            signals.ncc_max = Some(det.ncc_t0_max * (1.0 - f));
                            if hit {
                                events.push(SurgicalEvent::ContactDetected);
                            }
                        }
                    }
                }
                source => {
                    if lagged_hit(source, self.gt_contact_frame, k) {
                        events.push(SurgicalEvent::ContactDetected);
                    }
                }
            }
        } else {
            self.contact = None;
        }

        if want_puncture {
            if let Some(e) = self.puncture_step(frame, signals)? {
                events.push(e);
            }
        } else {
            self.puncture = None;
        }

        if !self.state.is_terminal() {
            let t = self.time();
            if self.sim.flags.tissue_damage {
                signals.faults.push("tissue damage".into());
                events.push(SurgicalEvent::Abort);
            } else if t >= self.config.time_limit_s {
                signals.faults.push(format!("time limit of {} s reached", self.config.time_limit_s));
                events.push(SurgicalEvent::Abort);
            }
        }
        if self.mode == ControlMode::Autonomous {
            events.extend(self.phase_monitors(signals, &events));
        }
        Ok(events)
    }

    /// Puncture detection is only meaningful once contact is established.
    fn puncture_step(&mut self, frame: &Frame, signals: &mut Signals) -> Result<Option<SurgicalEvent>> {
        if !self.contact_detected {
            return Err(Error::Gating);
        }
        match self.config.perception.puncture {
            Source::Vision => {
                if self.puncture.is_none() {
                    let model = self.model.clone().ok_or_else(|| Error::Config("no puncture model loaded".into()))?;
                    let center = self.tip_est.unwrap_or_else(|| self.renderer.tip_px(&self.sim));
                    self.puncture = Some(PunctureDetector::new(model, center, &self.config.puncture)?);
                }
                let det = self.puncture.as_mut().expect("armed above");
                signals.y_hat = det.observe(frame)?;
                Ok(det.fired.then_some(SurgicalEvent::PunctureDetected))
            }
            source => Ok(lagged_hit(source, self.gt_puncture_frame, self.frame_index).then_some(SurgicalEvent::PunctureDetected)),
        }
    }

    /// Phase completion and limit checks that do not depend on images.
    fn phase_monitors(&self, signals: &mut Signals, pending: &[SurgicalEvent]) -> Vec<SurgicalEvent> {
        let travel = (self.sim.robot - self.phase_origin).norm();
        let mut out = Vec::new();
        match self.state {
            SurgicalState::LowerZ => {
                let floor = self.scene.retina_plane_z + self.config.approach_clearance_um;
                if self.sim.robot.z <= floor + 1e-6 && !pending.contains(&SurgicalEvent::ContactDetected) {
                    signals.faults.push("reached the descent floor without contact".into());
                    out.push(SurgicalEvent::Abort);
                }
            }
            SurgicalState::InsertAxial => {
                if travel >= self.config.max_insertion_um - 1e-6 && !pending.contains(&SurgicalEvent::PunctureDetected) {
                    signals.faults.push(format!("no puncture within {} um of insertion", self.config.max_insertion_um));
                    out.push(SurgicalEvent::Abort);
                }
            }
            SurgicalState::Hold if self.time() - self.phase_start_t >= self.config.hold_s - 1e-9 => {
                out.push(SurgicalEvent::HoldElapsed);
            }
            SurgicalState::Retract if travel >= self.config.retract_distance_um - self.config.retract_tolerance_um => {
                out.push(SurgicalEvent::RetractComplete);
            }
            _ => {}
        }
        out
    }

    fn workspace(&self) -> Workspace {
        use SurgicalState as S;
        let in_tissue = match self.mode {
            ControlMode::Autonomous => matches!(self.state, S::InsertAxial | S::Hold | S::Retract),
            ControlMode::RobotAssisted => self.contact_detected,
        };
        let floor = if in_tissue { self.config.insertion_floor_um } else { self.config.approach_clearance_um };
        let h = self.config.workspace_half_extent_um;
        Workspace {
            min: [-h, -h, self.scene.retina_plane_z + floor],
            max: [h, h, self.scene.retina_plane_z + self.config.workspace_max_z_um],
        }
    }

    fn plan(&self) -> Result<Option<(Vec3, MpcSummary)>> {
        use SurgicalState as S;
        let c = &self.config;
        let entry = self.scene.entry_point;
        let ws = self.workspace();
        let traj = match self.state {
            S::NavigatePlanar => {
                let (Some(goal), Some(est)) = (self.goal_px, self.tip_est) else {
                    return Ok(None);
                };
                let out = servo_step(
                    est,
                    goal,
                    &self.sim,
                    &entry,
                    self.renderer.calibration(),
                    c.nav_speed_um_s,
                    ws,
                    c.align_tolerance_px,
                    &c.mpc,
                )?;
                match out.trajectory {
                    Some(t) => t,
                    None => return Ok(None),
                }
            }
            S::LowerZ => {
                let r = self.sim.robot;
                let goal = Vec3::new(r.x, r.y, self.scene.retina_plane_z + c.descent_target_um);
                solve_mpc(&build_mpc(S::LowerZ, &self.sim, &entry, &goal, c.lower_speed_um_s, ws, &c.mpc)?)?
            }
            S::InsertAxial => {
                let goal = self.phase_origin + self.phase_dir * c.max_insertion_um;
                solve_mpc(&build_mpc(S::InsertAxial, &self.sim, &entry, &goal, c.insert_speed_um_s, ws, &c.mpc)?)?
            }
            S::Retract => {
                let goal = self.phase_origin - self.phase_dir * c.retract_distance_um;
                solve_mpc(&build_mpc(S::Retract, &self.sim, &entry, &goal, c.retract_speed_um_s, ws, &c.mpc)?)?
            }
            _ => return Ok(None),
        };
        if traj.max_constraint_violation > c.mpc.violation_tolerance {
            return Err(Error::Infeasible(format!(
                "planned trajectory violates constraints by {:.3e}",
                traj.max_constraint_violation
            )));
        }
        Ok(Some((traj.controls[0], summarize(&traj))))
    }
}

fn lagged_hit(source: Source, gt_frame: Option<usize>, k: usize) -> bool {
    let lag = match source {
        Source::Lagged { frames } => frames,
        _ => 0,
    };
    gt_frame.is_some_and(|g| k >= g + lag)
}

fn summarize(t: &Trajectory) -> MpcSummary {
    MpcSummary {
        cost: t.cost,
        iterations: t.iterations,
        max_violation: t.max_constraint_violation,
        max_rcm_residual: t.max_rcm_residual,
        cost_non_increasing: t.cost_history.windows(2).all(|w| w[1] <= w[0]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{create_scene, SceneConfig};

    fn oracle_episode() -> Episode {
        let scene = create_scene(&SceneConfig::default(), 3).unwrap();
        let v = &scene.veins[0];
        let s = v.arc_length() * 0.5;
        let target = v.point_at(s);
        let xy = target.xy();
        let cfg = AutonomyConfig { perception: PerceptionConfig::oracle(), ..AutonomyConfig::default() };
        let micro = MicroscopeConfig::default();
        let cal = micro.calibration(scene.px_per_mm).unwrap();
        let goal = cal.project(xy);
        let start = Vec3::new(xy.x - 600.0, xy.y + 300.0, 1000.0);
        let setup = EpisodeSetup { scene, start_tip: start, goal_px: Some([goal.x, goal.y]), trial_seed: 5, config_digest: String::new() };
        Episode::new(setup, cfg, &micro, None).unwrap()
    }

    #[test]
    fn oracle_episode_completes() {
        let mut ep = oracle_episode();
        ep.run().unwrap();
        let log = ep.log();
        assert_eq!(log.final_state(), Some(SurgicalState::Done));
        for name in ["GoalClicked", "AlignedXY", "ContactDetected", "PunctureDetected", "HoldElapsed", "RetractComplete"] {
            assert!(log.event_frame(name).is_some(), "missing {name}");
        }
        // no motion on a frame that changed state
        let mut prev = SurgicalState::AwaitGoal;
        for r in &log.frames {
            if r.state != prev {
                assert_eq!(r.control, [0.0; 3], "frame {}", r.frame);
            }
            prev = r.state;
        }
        assert!(log.frames.iter().all(|r| !r.flags.tissue_damage));
    }

    #[test]
    fn commands_are_gated() {
        let mut ep = oracle_episode();
        assert!(matches!(ep.submit(Command::Teleop { axes: [1.0, 0.0, 0.0], pedal: 1.0 }), Err(Error::Rejected(_))));
        assert!(matches!(ep.submit(Command::ClickGoal { px: [10.0, 10.0] }), Err(Error::Rejected(_))));
        ep.tick().unwrap();
        assert_eq!(ep.state(), SurgicalState::NavigatePlanar);
        assert!(matches!(ep.submit(Command::ClickGoal { px: [10.0, 10.0] }), Err(Error::Rejected(_))));
        ep.submit(Command::Abort).unwrap();
        ep.tick().unwrap();
        assert_eq!(ep.state(), SurgicalState::Aborted);
    }

    #[test]
    fn vision_without_model_is_rejected() {
        let scene = create_scene(&SceneConfig::default(), 3).unwrap();
        let setup = EpisodeSetup {
            scene,
            start_tip: Vec3::new(0.0, 0.0, 1000.0),
            goal_px: None,
            trial_seed: 1,
            config_digest: String::new(),
        };
        let r = Episode::new(setup, AutonomyConfig::default(), &MicroscopeConfig::default(), None);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
