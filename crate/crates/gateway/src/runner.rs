//! Simulation thread: owns the live episode and ticks it at a fixed period.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use cannula_core::autonomy::{Command, Episode, EpisodeSetup};
use cannula_core::harness::{metrics_from_log, plan_for_seed, SandboxConfig, TrialMetrics};
use cannula_core::perception::puncture::PunctureModel;
use cannula_core::scene::EyeScene;
use tokio::sync::{broadcast, oneshot, watch};

use crate::protocol::{encode_frame_packet, ClientMessage, ServerMessage, StateMsg};
use crate::GatewayError;

pub(crate) type Reply = oneshot::Sender<Result<(), String>>;

pub(crate) struct Request {
    pub message: ClientMessage,
    pub reply: Reply,
}

pub(crate) struct Runner {
    pub sandbox: SandboxConfig,
    pub scene: EyeScene,
    pub model: Option<Arc<PunctureModel>>,
    pub period: Duration,
    pub requests: Receiver<Request>,
    pub frames: watch::Sender<Option<Bytes>>,
    pub messages: broadcast::Sender<ServerMessage>,
    pub finished: Arc<Mutex<Vec<TrialMetrics>>>,
    pub shutdown: Arc<AtomicBool>,
    pub seq: u64,
}

impl Runner {
    pub fn new_episode(&self, trial_seed: u64) -> Result<Episode, GatewayError> {
        let plan = plan_for_seed(&self.scene, &self.sandbox, trial_seed)?;
        let setup = EpisodeSetup {
            scene: self.scene.clone(),
            start_tip: plan.start_tip.into(),
            // the operator clicks the goal
            goal_px: None,
            trial_seed,
            config_digest: self.sandbox.digest()?,
        };
        let episode = Episode::new(setup, self.sandbox.autonomy.clone(), &self.sandbox.microscope, self.model.clone())?;
        let _ = self.messages.send(ServerMessage::TrialStarted { trial_seed, scene_seed: self.scene.seed });
        Ok(episode)
    }

    pub fn run(mut self, first_trial: u64) {
        let mut episode = match self.new_episode(first_trial) {
            Ok(e) => Some(e),
            Err(e) => {
                let _ = self.messages.send(ServerMessage::Error { message: e.to_string() });
                None
            }
        };
        let mut next = Instant::now();
        while !self.shutdown.load(Ordering::Relaxed) {
            let active = episode.as_ref().is_some_and(|e| !e.is_finished());
            let wait = if active { next.saturating_duration_since(Instant::now()) } else { Duration::from_millis(50) };
            match self.requests.recv_timeout(wait) {
                Ok(req) => {
                    let outcome = self.handle(req.message, &mut episode);
                    let _ = req.reply.send(outcome);
                    continue;
                }
                Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => {}
            }
            if !active {
                continue;
            }
            next = (next + self.period).max(Instant::now());
            let ep = episode.as_mut().expect("active episode");
            if let Err(e) = self.tick(ep) {
                log::error!("live episode failed: {e}");
                let _ = self.messages.send(ServerMessage::Error { message: e.to_string() });
                episode = None;
            }
        }
    }

    fn handle(&mut self, msg: ClientMessage, episode: &mut Option<Episode>) -> Result<(), String> {
        if let ClientMessage::StartTrial { seed } = msg {
            *episode = Some(self.new_episode(seed).map_err(|e| e.to_string())?);
            return Ok(());
        }
        let ep = episode.as_mut().ok_or_else(|| "no trial is running".to_string())?;
        if ep.is_finished() {
            return Err("the trial has ended; start a new one".into());
        }
        let cmd = match msg {
            ClientMessage::ClickGoal { px } => Command::ClickGoal { px },
            ClientMessage::SetMode { mode } => Command::SetMode { mode },
            ClientMessage::Teleop { axes, pedal } => Command::Teleop { axes, pedal },
            ClientMessage::Abort => Command::Abort,
            ClientMessage::StartTrial { .. } => unreachable!("handled above"),
        };
        ep.submit(cmd).map_err(|e| e.to_string())
    }

    fn tick(&mut self, ep: &mut Episode) -> Result<(), GatewayError> {
        let out = ep.tick()?;
        self.seq += 1;
        let png = out.frame.to_png()?;
        let _ = self.frames.send(Some(Bytes::from(encode_frame_packet(self.seq, out.record.t, &png))));
        for e in &out.record.events {
            let _ = self.messages.send(ServerMessage::Event { event: *e, t: out.record.t });
        }
        let metrics = if ep.is_finished() {
            let m = metrics_from_log(ep.log())?;
            self.finished.lock().expect("report lock").push(m.clone());
            Some(m)
        } else {
            None
        };
        let _ = self.messages.send(ServerMessage::State(StateMsg {
            seq: self.seq,
            t: out.record.t,
            state: out.record.state,
            mode: ep.mode(),
            tip_px_est: out.record.tip_est_px,
            metrics,
            f: out.record.f,
            y_hat: out.record.y_hat,
        }));
        Ok(())
    }
}
