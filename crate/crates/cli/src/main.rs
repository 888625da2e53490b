use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use cannula_core::autonomy::{ControlMode, Episode, EpisodeSetup, PerceptionConfig, Source};
use cannula_core::harness::{
    emit_delay_histograms, emit_plots, load_clips, lowering_episodes, metrics_from_log, plan_for_seed, puncture_clips, replay, run_campaign, save_clips,
    CampaignConfig, CampaignReport, ClipSpec, LoweringSpec, SandboxConfig,
};
use cannula_core::perception::contact::{calibrate_gamma, GammaSearch};
use cannula_core::perception::puncture::{evaluate, train, EvalConfig, ModelShape, PunctureClip, PunctureModel, TrainConfig};
use cannula_core::scene::{create_scene, Vec3};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Simulated retinal vein cannulation: trials, campaigns, detectors and the live gateway.
#[derive(Parser)]
#[command(name = "cannula", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Sandbox configuration (.toml or .json); defaults apply when omitted.
    #[arg(long, env = "CANNULA_CONFIG")]
    config: Option<PathBuf>,
    /// Trained puncture model; overrides the config's model path.
    #[arg(long, env = "CANNULA_MODEL")]
    model: Option<PathBuf>,
    /// Replace every detector with ground truth.
    #[arg(long, env = "CANNULA_ORACLE")]
    oracle: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one autonomous trial and print its metrics.
    RunTrial {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "CANNULA_SCENE", default_value_t = 101)]
        scene: u64,
        #[arg(long, env = "CANNULA_SEED", default_value_t = 0)]
        seed: u64,
        /// Goal pixel as `x,y`; picked on a vein when omitted.
        #[arg(long, env = "CANNULA_GOAL", value_parser = parse_px)]
        goal: Option<[f64; 2]>,
        /// Write the per-frame log here (JSONL).
        #[arg(long, env = "CANNULA_LOG")]
        log: Option<PathBuf>,
        /// Write plots for the trial into this directory.
        #[arg(long, env = "CANNULA_PLOTS")]
        plots: Option<PathBuf>,
    },
    /// Run a randomized campaign and write trials.csv, report.json and logs.
    RunCampaign {
        #[command(flatten)]
        common: Common,
        /// Total trials, split evenly over the scenes.
        #[arg(long, env = "CANNULA_TRIALS", default_value_t = 24)]
        trials: usize,
        #[arg(long, env = "CANNULA_SCENES", default_value_t = 3)]
        scenes: usize,
        #[arg(long, env = "CANNULA_SEED", default_value_t = 7)]
        seed: u64,
        #[arg(long, env = "CANNULA_OUT")]
        out: PathBuf,
    },
    /// Recompute metrics from a saved log.
    Replay {
        #[arg(long, env = "CANNULA_LOG")]
        log: PathBuf,
    },
    /// Plot one log, or every log of a campaign directory.
    EmitPlots {
        #[arg(long, env = "CANNULA_REPORT", conflicts_with = "log", required_unless_present = "log")]
        report: Option<PathBuf>,
        #[arg(long, env = "CANNULA_LOG")]
        log: Option<PathBuf>,
        /// Output directory; defaults to `plots/` next to the input.
        #[arg(long, env = "CANNULA_OUT")]
        out: Option<PathBuf>,
    },
    /// Generate labelled insertion clips as a dataset directory.
    GenerateClips {
        #[arg(long, env = "CANNULA_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, env = "CANNULA_CLIPS", default_value_t = 250)]
        clips: usize,
        #[arg(long, env = "CANNULA_SEED", default_value_t = 1000)]
        seed: u64,
        #[arg(long, env = "CANNULA_OUT")]
        out: PathBuf,
    },
    /// Train the puncture network and save it.
    TrainPuncture {
        #[arg(long, env = "CANNULA_CONFIG")]
        config: Option<PathBuf>,
        /// Train on this dataset directory instead of generating clips.
        #[arg(long, env = "CANNULA_DATASET")]
        dataset: Option<PathBuf>,
        #[arg(long, env = "CANNULA_CLIPS", default_value_t = 175)]
        clips: usize,
        #[arg(long, env = "CANNULA_SEED", default_value_t = 1000)]
        seed: u64,
        #[arg(long, env = "CANNULA_EPOCHS")]
        epochs: Option<usize>,
        #[arg(long, env = "CANNULA_OUT")]
        out: PathBuf,
    },
    /// Pick the contact threshold gain from simulated lowering runs.
    CalibrateGamma {
        #[arg(long, env = "CANNULA_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, env = "CANNULA_EPISODES", default_value_t = 14)]
        episodes: usize,
        #[arg(long, env = "CANNULA_SEED", default_value_t = 3000)]
        seed: u64,
        /// Write the configuration with the calibrated gain here.
        #[arg(long, env = "CANNULA_WRITE_CONFIG")]
        write_config: Option<PathBuf>,
    },
    /// Score a trained puncture model on held-out clips.
    EvalDetector {
        #[arg(long, env = "CANNULA_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, env = "CANNULA_MODEL")]
        model: PathBuf,
        #[arg(long, env = "CANNULA_DATASET")]
        dataset: Option<PathBuf>,
        #[arg(long, env = "CANNULA_CLIPS", default_value_t = 75)]
        clips: usize,
        #[arg(long, env = "CANNULA_SEED", default_value_t = 2000)]
        seed: u64,
    },
    /// Serve the live simulation over WebSocket.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "CANNULA_BIND", default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, env = "CANNULA_MODE", value_enum, default_value_t = Mode::Autonomous)]
        mode: Mode,
        #[arg(long, env = "CANNULA_SCENE", default_value_t = 101)]
        scene: u64,
        #[arg(long, env = "CANNULA_SEED", default_value_t = 0)]
        seed: u64,
        /// Simulation tick period; one camera frame per tick.
        #[arg(long, env = "CANNULA_TICK_MS", default_value_t = 33)]
        tick_ms: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Autonomous,
    RobotAssisted,
}

fn parse_px(s: &str) -> Result<[f64; 2], String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    let x: f64 = x.trim().parse().map_err(|e| format!("x: {e}"))?;
    let y: f64 = y.trim().parse().map_err(|e| format!("y: {e}"))?;
    Ok([x, y])
}

fn load_config(path: Option<&Path>) -> anyhow::Result<SandboxConfig> {
    let cfg = match path {
        Some(p) => SandboxConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => SandboxConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Config plus the puncture model the perception settings call for.
fn setup(common: &Common) -> anyhow::Result<(SandboxConfig, Option<Arc<PunctureModel>>)> {
    let mut cfg = load_config(common.config.as_deref())?;
    if common.oracle {
        cfg.autonomy.perception = PerceptionConfig::oracle();
    }
    let path = common.model.clone().or_else(|| cfg.harness.model_path.clone());
    let model = match (&cfg.autonomy.perception.puncture, path) {
        (Source::Vision, None) => bail!("vision puncture detection needs a model: pass --model (see train-puncture) or --oracle"),
        (Source::Vision, Some(p)) => {
            Some(Arc::new(PunctureModel::load(&p).with_context(|| format!("loading model {}", p.display()))?))
        }
        _ => None,
    };
    Ok((cfg, model))
}

fn clips_from(dataset: Option<&Path>, cfg: &SandboxConfig, count: usize, seed: u64) -> anyhow::Result<Vec<PunctureClip>> {
    Ok(match dataset {
        Some(d) => load_clips(d).with_context(|| format!("reading dataset {}", d.display()))?,
        None => puncture_clips(cfg, &ClipSpec::default(), count, seed)?,
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Cmd::RunTrial { common, scene, seed, goal, log, plots } => {
            let (cfg, model) = setup(&common)?;
            let scene = create_scene(&cfg.scene, scene)?;
            let plan = plan_for_seed(&scene, &cfg, seed)?;
            let setup = EpisodeSetup {
                scene,
                start_tip: Vec3::from(plan.start_tip),
                goal_px: Some(goal.unwrap_or(plan.goal_px)),
                trial_seed: seed,
                config_digest: cfg.digest()?,
            };
            let mut episode = Episode::new(setup, cfg.autonomy.clone(), &cfg.microscope, model)?;
            episode.run()?;
            let log_data = episode.into_log();
            let metrics = metrics_from_log(&log_data)?;
            if let Some(p) = log {
                log_data.save(&p)?;
            }
            if let Some(dir) = plots {
                emit_plots(&log_data, &dir)?;
            }
            print_json(&metrics)?;
        }
        Cmd::RunCampaign { common, trials, scenes, seed, out } => {
            let (cfg, model) = setup(&common)?;
            if scenes == 0 || trials == 0 || trials % scenes != 0 {
                bail!("--trials ({trials}) must be a positive multiple of --scenes ({scenes})");
            }
            let campaign = CampaignConfig {
                scene_seeds: (1..=scenes as u64).map(|i| 101 * i).collect(),
                trials_per_scene: trials / scenes,
                seed,
            };
            let report = run_campaign(&cfg, &campaign, model, Some(&out.join("logs")))?;
            report.write(&out)?;
            print_json(&report.aggregate)?;
            if let Some(why) = &report.halted {
                log::error!("campaign halted: {why}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Replay { log } => {
            let (_, metrics) = replay(&log)?;
            print_json(&metrics)?;
        }
        Cmd::EmitPlots { report, log, out } => {
            let logs: Vec<PathBuf> = match (&report, &log) {
                (_, Some(l)) => vec![l.clone()],
                (Some(dir), None) => {
                    let src = if dir.join("logs").is_dir() { dir.join("logs") } else { dir.clone() };
                    let mut v: Vec<PathBuf> = std::fs::read_dir(&src)?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
                        .collect();
                    v.sort();
                    v
                }
                (None, None) => unreachable!("clap requires one input"),
            };
            if logs.is_empty() {
                bail!("no .jsonl logs found");
            }
            let base = out.unwrap_or_else(|| match (&report, &log) {
                (Some(dir), _) => dir.join("plots"),
                (_, Some(l)) => l.parent().unwrap_or(Path::new(".")).join("plots"),
                _ => PathBuf::from("plots"),
            });
            for path in &logs {
                let (episode, _) = replay(path)?;
                let dir = if logs.len() > 1 { base.join(path.file_stem().unwrap_or_default()) } else { base.clone() };
                for f in emit_plots(&episode, &dir)? {
                    println!("{}", f.display());
                }
            }
            if let Some(summary) = report.as_ref().map(|d| d.join("report.json")).filter(|p| p.is_file()) {
                let campaign: CampaignReport = serde_json::from_str(&std::fs::read_to_string(&summary)?)
                    .with_context(|| format!("reading {}", summary.display()))?;
                let hist = base.join("delays.svg");
                emit_delay_histograms(&campaign.trials, &hist, 2.0)?;
                println!("{}", hist.display());
            }
        }
        Cmd::GenerateClips { config, clips, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = puncture_clips(&cfg, &ClipSpec::default(), clips, seed)?;
            save_clips(&data, &out)?;
            println!("wrote {} clips to {}", data.len(), out.display());
        }
        Cmd::TrainPuncture { config, dataset, clips, seed, epochs, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = clips_from(dataset.as_deref(), &cfg, clips, seed)?;
            let mut tc = TrainConfig { seed, ..TrainConfig::default() };
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            let (model, report) = train(ModelShape::default(), &data, &tc)?;
            model.save(&out)?;
            if let Some(last) = report.epoch_losses.last() {
                log::info!("final epoch loss {:.4} (bce {:.4}, reconstruction {:.4})", last.total, last.bce, last.reconstruction);
            }
            print_json(&report)?;
        }
        Cmd::CalibrateGamma { config, episodes, seed, write_config } => {
            let mut cfg = load_config(config.as_deref())?;
            let eps = lowering_episodes(&cfg, &LoweringSpec::default(), episodes, seed)?;
            let cal = calibrate_gamma(&eps, &GammaSearch::default())?;
            if let Some(p) = write_config {
                cfg.autonomy.contact.gamma = cal.gamma;
                std::fs::write(&p, cfg.to_toml()?)?;
            }
            print_json(&cal)?;
        }
        Cmd::EvalDetector { config, model, dataset, clips, seed } => {
            let cfg = load_config(config.as_deref())?;
            let model = PunctureModel::load(&model).with_context(|| format!("loading model {}", model.display()))?;
            let data = clips_from(dataset.as_deref(), &cfg, clips, seed)?;
            let eval = EvalConfig { threshold: cfg.autonomy.puncture.threshold, ..EvalConfig::default() };
            let mut ev = evaluate(&model, &data, &eval)?;
            ev.outcomes.clear();
            print_json(&ev)?;
        }
        Cmd::Serve { common, bind, mode, scene, seed, tick_ms } => {
            let (mut cfg, model) = setup(&common)?;
            cfg.autonomy.mode = match mode {
                Mode::Autonomous => ControlMode::Autonomous,
                Mode::RobotAssisted => ControlMode::RobotAssisted,
            };
            let gw = cannula_gateway::GatewayConfig {
                sandbox: cfg,
                scene_seed: scene,
                trial_seed: seed,
                tick_period: Duration::from_millis(tick_ms),
                model,
            };
            tokio::runtime::Runtime::new()?.block_on(cannula_gateway::run(bind, gw))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
