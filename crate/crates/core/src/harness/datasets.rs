//! Synthetic datasets: lowering traces for the contact threshold and
//! insertion clips for the puncture network.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::SandboxConfig;
use super::trial::plan_trial;
use crate::error::{Error, Result};
use crate::microscope::{add_sensor_noise, Frame, Renderer, Subsampler};
use crate::perception::contact::{ContactDetectorState, LoweringEpisode};
use crate::perception::puncture::{crop_at, PunctureClip};
use crate::scene::{create_scene, step, EyeScene, NeedleState, Vec2, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoweringSpec {
    /// Range of starting heights above the vein surface.
    pub start_clearance_um: [f64; 2],
    /// Frames recorded after the first true contact.
    pub frames_after_contact: usize,
}

impl Default for LoweringSpec {
    fn default() -> Self {
        Self { start_clearance_um: [60.0, 200.0], frames_after_contact: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipSpec {
    pub side: usize,
    pub rate_hz: f64,
    /// Uniform jitter of the crop centre, pixels.
    pub jitter_px: f64,
    /// Subsampled frames kept after the first punctured one.
    pub post_puncture_frames: usize,
    /// Share of clips whose wall never gives way.
    pub negative_fraction: f64,
    /// Length range of negative clips, subsampled frames.
    pub negative_frames: [usize; 2],
    /// Largest number of full-rate frames the contact report may lag.
    pub contact_lag_frames: usize,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            side: 32,
            rate_hz: 7.0,
            jitter_px: 1.5,
            post_puncture_frames: 4,
            negative_fraction: 0.3,
            negative_frames: [6, 14],
            contact_lag_frames: 1,
        }
    }
}

fn noisy(renderer: &Renderer, state: &NeedleState, t: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Frame {
    let mut f = renderer.render(state, t);
    add_sensor_noise(&mut f, sigma, rng);
    f
}

/// Scene and vein point for one sample.
fn sample_site(cfg: &SandboxConfig, rng: &mut ChaCha8Rng) -> Result<(EyeScene, Vec2, f64)> {
    let scene = create_scene(&cfg.scene, rng.next_u64())?;
    let cal = cfg.microscope.calibration(scene.px_per_mm)?;
    let plan = plan_trial(&scene, &cal, cfg, rng)?;
    let xy = Vec2::from(plan.goal_um);
    let surface = scene.vein_under(xy).map(|(_, z)| z).expect("planned goal lies over a vein");
    Ok((scene, xy, surface))
}

/// Vertical descents onto a vein at the configured lowering speed, with the
/// percent-change score of every frame.
pub fn lowering_episodes(cfg: &SandboxConfig, spec: &LoweringSpec, count: usize, seed: u64) -> Result<Vec<LoweringEpisode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = cfg.autonomy.dt;
    let speed = cfg.autonomy.lower_speed_um_s;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (scene, xy, surface) = sample_site(cfg, &mut rng)?;
        let renderer = Renderer::new(&scene, &cfg.microscope)?;
        let [lo, hi] = spec.start_clearance_um;
        let clearance = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let mut state = NeedleState::at_rest(&scene, Vec3::new(xy.x, xy.y, surface + clearance))?;
        let first = noisy(&renderer, &state, 0.0, cfg.microscope.noise_sigma, &mut rng);
        let mut det = ContactDetectorState::arm(&first, renderer.tip_px(&state), &cfg.autonomy.contact)?;
        let mut scores = vec![0.0];
        let mut contact_frame = None;
        let control = Vec3::new(0.0, 0.0, -speed);
        let limit = ((clearance + 200.0) / (speed * dt)) as usize + spec.frames_after_contact + 10;
        for k in 1..limit {
            state = step(&scene, &state, &control, dt)?.0;
            let f = noisy(&renderer, &state, k as f64 * dt, cfg.microscope.noise_sigma, &mut rng);
            scores.push(det.observe(&f)?.0);
            if contact_frame.is_none() && state.contact_seen {
                contact_frame = Some(k);
            }
            if contact_frame.is_some_and(|c| k >= c + spec.frames_after_contact) {
                break;
            }
        }
        let contact_frame =
            contact_frame.ok_or_else(|| Error::Contract(format!("descent in scene {} never touched the vein", scene.seed)))?;
        out.push(LoweringEpisode { scores, contact_frame, descent_step_um: speed * dt });
    }
    Ok(out)
}

/// Insertion clips: lower until contact (reported up to a few frames late),
/// then advance along the shaft at the insertion speed, keeping 7 Hz crops
/// around the tip position at the start of the insertion.
pub fn puncture_clips(cfg: &SandboxConfig, spec: &ClipSpec, count: usize, seed: u64) -> Result<Vec<PunctureClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = cfg.autonomy.dt;
    let sigma = cfg.microscope.noise_sigma;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 4 * count + 10 {
            return Err(Error::Contract("too many descents punctured before insertion".into()));
        }
        let (mut scene, xy, surface) = sample_site(cfg, &mut rng)?;
        let negative = rng.random_bool(spec.negative_fraction.clamp(0.0, 1.0));
        if negative {
            for v in &mut scene.veins {
                v.wall_puncture_force = 1e9;
            }
        }
        let renderer = Renderer::new(&scene, &cfg.microscope)?;
        let mut state = NeedleState::at_rest(&scene, Vec3::new(xy.x, xy.y, surface + rng.random_range(20.0..60.0)))?;
        let lower = Vec3::new(0.0, 0.0, -cfg.autonomy.lower_speed_um_s);
        let lag = rng.random_range(0..=spec.contact_lag_frames);
        let mut k = 0usize;
        let mut since_contact = None;
        while since_contact.is_none_or(|n| n < lag) {
            state = step(&scene, &state, &lower, dt)?.0;
            k += 1;
            if state.contact_seen {
                since_contact = Some(since_contact.map_or(0, |n| n + 1));
            }
            if k > 200 {
                return Err(Error::Contract("lowering never reached the vein".into()));
            }
        }
        if state.flags.punctured {
            // a weak wall gave way during the descent itself; draw again
            continue;
        }

        let jitter = Vec2::new(rng.random_range(-spec.jitter_px..=spec.jitter_px), rng.random_range(-spec.jitter_px..=spec.jitter_px));
        let center = renderer.tip_px(&state) + jitter;
        let dir = state.shaft_dir;
        let insert = dir * cfg.autonomy.insert_speed_um_s;
        let target_len = if negative {
            let [lo, hi] = spec.negative_frames;
            rng.random_range(lo..=hi.max(lo))
        } else {
            usize::MAX
        };
        let mut sub = Subsampler::new(spec.rate_hz)?;
        let mut clip =
            PunctureClip { side: spec.side, crops: Vec::new(), labels: Vec::new(), t: Vec::new(), robot_z: Vec::new(), puncture_robot_z: None };
        let t0 = k as f64 * dt;
        let mut positives = 0;
        for j in 0.. {
            let t = t0 + j as f64 * dt;
            if state.flags.punctured && clip.puncture_robot_z.is_none() {
                clip.puncture_robot_z = Some(state.robot.z);
            }
            if sub.accept(t)? {
                // sensor noise is per-pixel, so noising the crop alone is equivalent
                let pixels = crop_at(&renderer.render(&state, t), center, spec.side)?;
                let mut crop = Frame { width: spec.side, height: spec.side, pixels, t, px_per_mm: renderer.calibration().px_per_mm };
                add_sensor_noise(&mut crop, sigma, &mut rng);
                clip.crops.push(crop.pixels);
                clip.labels.push(state.flags.punctured);
                clip.t.push(t);
                clip.robot_z.push(state.robot.z);
                positives += state.flags.punctured as usize;
            }
            if positives > spec.post_puncture_frames || clip.crops.len() >= target_len {
                break;
            }
            if j > 2000 {
                return Err(Error::Contract("insertion clip never punctured".into()));
            }
            state = step(&scene, &state, &insert, dt)?.0;
        }
        clip.validate()?;
        out.push(clip);
    }
    Ok(out)
}

/// One line of a clip's `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelLine {
    frame: usize,
    t: f64,
    robot_z: f64,
    punctured: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClipMeta {
    side: usize,
    frames: usize,
    puncture_robot_z: Option<f64>,
}

/// Writes clips as `clip_NNNN/` directories holding `frame_NNN.png` crops,
/// `labels.jsonl` and `clip.json`.
pub fn save_clips(clips: &[PunctureClip], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, clip) in clips.iter().enumerate() {
        clip.validate()?;
        let cdir = dir.join(format!("clip_{i:04}"));
        fs::create_dir_all(&cdir)?;
        let mut labels = BufWriter::new(fs::File::create(cdir.join("labels.jsonl"))?);
        for (j, crop) in clip.crops.iter().enumerate() {
            let frame = Frame { width: clip.side, height: clip.side, pixels: crop.clone(), t: clip.t[j], px_per_mm: 0.0 };
            frame.write_png(&cdir.join(format!("frame_{j:03}.png")))?;
            let line = LabelLine { frame: j, t: clip.t[j], robot_z: clip.robot_z[j], punctured: clip.labels[j] };
            serde_json::to_writer(&mut labels, &line)?;
            labels.write_all(b"\n")?;
        }
        labels.flush()?;
        let meta = ClipMeta { side: clip.side, frames: clip.crops.len(), puncture_robot_z: clip.puncture_robot_z };
        fs::write(cdir.join("clip.json"), serde_json::to_vec_pretty(&meta)?)?;
    }
    Ok(())
}

/// Reads every `clip_*` directory under `dir`, in name order.
pub fn load_clips(dir: &Path) -> Result<Vec<PunctureClip>> {
    let mut dirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("clip_")))
        .collect();
    dirs.sort();
    let mut out = Vec::with_capacity(dirs.len());
    for cdir in dirs {
        let meta: ClipMeta = serde_json::from_slice(&fs::read(cdir.join("clip.json"))?)?;
        let mut clip = PunctureClip {
            side: meta.side,
            crops: Vec::new(),
            labels: Vec::new(),
            t: Vec::new(),
            robot_z: Vec::new(),
            puncture_robot_z: meta.puncture_robot_z,
        };
        for line in BufReader::new(fs::File::open(cdir.join("labels.jsonl"))?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: LabelLine = serde_json::from_str(&line)?;
            let img = image::open(cdir.join(format!("frame_{:03}.png", l.frame)))
                .map_err(|e| Error::Image(format!("{}: {e}", cdir.display())))?
                .into_luma8();
            if img.width() as usize != meta.side || img.height() as usize != meta.side {
                return Err(Error::Contract(format!("{}: frame {} is not {}x{}", cdir.display(), l.frame, meta.side, meta.side)));
            }
            clip.crops.push(img.into_raw());
            clip.labels.push(l.punctured);
            clip.t.push(l.t);
            clip.robot_z.push(l.robot_z);
        }
        if clip.crops.len() != meta.frames {
            return Err(Error::Contract(format!("{}: expected {} frames, found {}", cdir.display(), meta.frames, clip.crops.len())));
        }
        clip.validate()?;
        out.push(clip);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_directories_round_trip() {
        let clips = puncture_clips(&SandboxConfig::default(), &ClipSpec::default(), 3, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_clips(&clips, dir.path()).unwrap();
        assert!(dir.path().join("clip_0002/labels.jsonl").exists());
        assert_eq!(load_clips(dir.path()).unwrap(), clips);
    }

    #[test]
    fn lowering_traces_rise_at_contact() {
        let eps = lowering_episodes(&SandboxConfig::default(), &LoweringSpec::default(), 3, 4).unwrap();
        for e in &eps {
            assert!(e.contact_frame > 0 && e.contact_frame < e.scores.len());
            assert!(e.max_pre_contact() < 0.05, "pre-contact {}", e.max_pre_contact());
            assert!(e.scores[e.contact_frame..].iter().any(|&f| f > 0.08));
        }
    }

    #[test]
    fn clips_are_labelled_consistently() {
        let spec = ClipSpec { negative_fraction: 0.5, ..ClipSpec::default() };
        let clips = puncture_clips(&SandboxConfig::default(), &spec, 8, 2).unwrap();
        assert_eq!(clips.len(), 8);
        for c in &clips {
            match c.puncture_index() {
                Some(p) => {
                    assert!(c.labels[p..].iter().all(|&l| l));
                    assert_eq!(c.labels.len() - p, spec.post_puncture_frames + 1);
                    let pz = c.puncture_robot_z.unwrap();
                    assert!(pz <= c.robot_z[p - 1] && pz >= c.robot_z[p]);
                }
                None => assert!((6..=14).contains(&c.crops.len())),
            }
            assert!(c.t.windows(2).all(|w| w[1] - w[0] > 1.0 / 7.0 - 1.0 / 30.0));
        }
    }
}
