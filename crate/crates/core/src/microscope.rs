//! Top-down orthographic microscope: frame synthesis and pixel calibration.
//!
//! World `(x, y)` in micrometres maps to pixel coordinates
//! `(x, y) * px_per_mm / 1000 + origin`. Pixel `(i, j)` has its centre at the
//! continuous coordinate `(i, j)`. Height is invisible except through the
//! needle's bending.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{GrayImage, ImageFormat};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{EyeScene, NeedleState, Vec2, DEFAULT_PX_PER_MM, TIP_DIAMETER_UM};
use crate::texture::GradientNoise;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub px_per_mm: f64,
    pub origin_px: [f64; 2],
}

impl Default for Calibration {
    fn default() -> Self {
        Self { px_per_mm: DEFAULT_PX_PER_MM, origin_px: [320.0, 240.0] }
    }
}

impl Calibration {
    pub fn new(px_per_mm: f64, origin_px: [f64; 2]) -> Result<Self> {
        if !(px_per_mm > 0.0) {
            return Err(Error::Calibration(format!("px_per_mm must be positive, got {px_per_mm}")));
        }
        Ok(Self { px_per_mm, origin_px })
    }

    pub fn origin(&self) -> Vec2 {
        Vec2::new(self.origin_px[0], self.origin_px[1])
    }

    /// World position (micrometres) to pixel coordinates.
    pub fn project(&self, xy_um: Vec2) -> Vec2 {
        xy_um * (self.px_per_mm / 1000.0) + self.origin()
    }

    pub fn unproject(&self, px: Vec2) -> Vec2 {
        (px - self.origin()) * (1000.0 / self.px_per_mm)
    }

    pub fn px_from_um(&self, d_um: f64) -> f64 {
        d_um * self.px_per_mm / 1000.0
    }

    pub fn um_from_px(&self, d_px: f64) -> f64 {
        um_from_px(d_px, self)
    }
}

/// Pixel distance to micrometres.
pub fn um_from_px(d_px: f64, cal: &Calibration) -> f64 {
    d_px * 1000.0 / cal.px_per_mm
}

/// 8-bit grayscale frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub t: f64,
    pub px_per_mm: f64,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, t: f64, px_per_mm: f64) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Contract(format!(
                "frame buffer of {} bytes does not match {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels, t, px_per_mm })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Copies a `w x h` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: i64, y0: i64, w: usize, h: usize) -> Result<Vec<u8>> {
        if x0 < 0 || y0 < 0 || x0 as usize + w > self.width || y0 as usize + h > self.height {
            return Err(Error::Boundary(format!(
                "{w}x{h} window at ({x0}, {y0}) exceeds {}x{} frame",
                self.width, self.height
            )));
        }
        let (x0, y0) = (x0 as usize, y0 as usize);
        let mut out = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            out.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(out)
    }

    /// Bilinear sample at continuous pixel coordinates, clamped to the border.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let g = |xx, yy| self.get(xx, yy) as f64;
        let top = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
        let bottom = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_png()?)?;
        Ok(())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path, t: f64, px_per_mm: f64) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Image("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(Error::Image("only binary 8-bit PGM is supported".into()));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Image(format!("bad PGM dimension {s}")));
        let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
        let data = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Image("truncated PGM data".into()))?;
        Frame::new(w, h, data.to_vec(), t, px_per_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicroscopeConfig {
    pub width: usize,
    pub height: usize,
    pub origin_px: [f64; 2],
    /// Camera sensor noise standard deviation in gray levels.
    pub noise_sigma: f64,
    pub frame_rate_hz: f64,
    pub retina_level: f64,
    pub retina_contrast: f64,
    pub texture_scale_um: f64,
    pub vein_darkening: f64,
    pub needle_level: f64,
    pub tip_segment_um: f64,
    pub shaft_width_um: f64,
    /// Apparent elbow rotation per micrometre of contact deflection.
    pub bend_gain_deg_per_um: f64,
    /// Length of tip segment drawn faded once inside a lumen.
    pub lumen_fade_um: f64,
    pub lumen_fade_alpha: f64,
}

impl Default for MicroscopeConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            origin_px: [320.0, 240.0],
            noise_sigma: 3.0,
            frame_rate_hz: 30.0,
            retina_level: 120.0,
            retina_contrast: 22.0,
            texture_scale_um: 260.0,
            vein_darkening: 0.45,
            needle_level: 235.0,
            tip_segment_um: 150.0,
            shaft_width_um: 50.0,
            bend_gain_deg_per_um: 0.8,
            lumen_fade_um: 45.0,
            lumen_fade_alpha: 0.3,
        }
    }
}

impl MicroscopeConfig {
    pub fn calibration(&self, px_per_mm: f64) -> Result<Calibration> {
        Calibration::new(px_per_mm, self.origin_px)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("frame size must be positive".into()));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(Error::Config("frame rate must be positive".into()));
        }
        Ok(())
    }
}

/// 2-D needle outline in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleSketch {
    pub tip: Vec2,
    pub elbow: Vec2,
    /// Unit image direction of the shaft, pointing toward the elbow.
    pub shaft_axis: Vec2,
    pub bend_deg: f64,
    pub faded: bool,
}

/// Renders frames for one scene. The static background is computed once.
pub struct Renderer {
    config: MicroscopeConfig,
    cal: Calibration,
    entry_px: Vec2,
    background: Vec<f32>,
}

impl Renderer {
    pub fn new(scene: &EyeScene, config: &MicroscopeConfig) -> Result<Self> {
        config.validate()?;
        let cal = config.calibration(scene.px_per_mm)?;
        let noise = GradientNoise::new(scene.texture_seed);
        let (w, h) = (config.width, config.height);
        let um_per_px = 1000.0 / cal.px_per_mm;
        let aa = um_per_px; // one pixel of edge softening
        let mut background = Vec::with_capacity(w * h);
        for j in 0..h {
            for i in 0..w {
                let xy = cal.unproject(Vec2::new(i as f64, j as f64));
                let tex = noise.fbm(xy.x / config.texture_scale_um, xy.y / config.texture_scale_um, 4);
                background.push(config.retina_level + config.retina_contrast * tex);
            }
        }
        // distance to each centerline, filled segment by segment over the
        // pixels each segment can reach
        let mut dist = vec![f64::INFINITY; w * h];
        for vein in &scene.veins {
            dist.fill(f64::INFINITY);
            let reach = vein.radius + aa;
            for seg in vein.centerline.windows(2) {
                let (a, b) = (seg[0].xy(), seg[1].xy());
                let lo = cal.project(a.inf(&b) - Vec2::repeat(reach));
                let hi = cal.project(a.sup(&b) + Vec2::repeat(reach));
                let (i0, j0) = (lo.x.floor().max(0.0) as usize, lo.y.floor().max(0.0) as usize);
                let (i1, j1) = (hi.x.ceil().min(w as f64 - 1.0), hi.y.ceil().min(h as f64 - 1.0));
                if i1 < 0.0 || j1 < 0.0 {
                    continue;
                }
                let ab = b - a;
                let len2 = ab.norm_squared();
                for j in j0..=j1 as usize {
                    for i in i0..=i1 as usize {
                        let xy = cal.unproject(Vec2::new(i as f64, j as f64));
                        let t = if len2 > 0.0 { ((xy - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                        let d = (xy - (a + ab * t)).norm();
                        let slot = &mut dist[j * w + i];
                        if d < *slot {
                            *slot = d;
                        }
                    }
                }
            }
            for (v, &d) in background.iter_mut().zip(&dist) {
                if d < reach {
                    let q = (d / vein.radius).min(1.0);
                    let shade = 1.0 - config.vein_darkening * (1.0 - 0.35 * q * q);
                    let cover = ((vein.radius + 0.5 * aa - d) / aa).clamp(0.0, 1.0);
                    *v *= 1.0 - cover * (1.0 - shade);
                }
            }
        }
        let background: Vec<f32> = background.into_iter().map(|v| v as f32).collect();
        let entry_px = cal.project(scene.entry_point.xy());
        Ok(Self { config: config.clone(), cal, entry_px, background })
    }

    pub fn calibration(&self) -> &Calibration {
        &self.cal
    }

    pub fn config(&self) -> &MicroscopeConfig {
        &self.config
    }

    pub fn tip_px(&self, state: &NeedleState) -> Vec2 {
        self.cal.project(state.tip.xy())
    }

    pub fn sketch(&self, state: &NeedleState) -> NeedleSketch {
        let tip = self.tip_px(state);
        let towards = tip - self.entry_px;
        let axis = if towards.norm() > 1e-9 { towards.normalize() } else { Vec2::new(1.0, 0.0) };
        let bend_deg =
            (state.elbow_angle_deg - self.config.bend_gain_deg_per_um * state.deflection).clamp(0.0, 90.0);
        let (s, c) = bend_deg.to_radians().sin_cos();
        let tip_dir = Vec2::new(axis.x * c - axis.y * s, axis.x * s + axis.y * c);
        let len = self.cal.px_from_um(self.config.tip_segment_um);
        NeedleSketch { tip, elbow: tip - tip_dir * len, shaft_axis: axis, bend_deg, faded: state.flags.punctured }
    }

    /// Noise-free frame of `state` at time `t`.
    pub fn render(&self, state: &NeedleState, t: f64) -> Frame {
        let (w, h) = (self.config.width, self.config.height);
        let mut buf = self.background.clone();
        let sk = self.sketch(state);
        let level = self.config.needle_level as f32;
        let shaft_hw = 0.5 * self.cal.px_from_um(self.config.shaft_width_um);
        let tip_hw = (0.5 * self.cal.px_from_um(TIP_DIAMETER_UM)).max(0.6);

        // shaft: from far outside the frame up to the elbow, round join at the elbow
        let far = sk.elbow - sk.shaft_axis * (2.0 * (w + h) as f64);
        let shaft_len = (sk.elbow - far).norm();
        draw_segment(&mut buf, w, h, far, sk.shaft_axis, shaft_len, shaft_hw, shaft_hw, false, |_| 1.0, level);

        let tip_vec = sk.tip - sk.elbow;
        let tip_len = tip_vec.norm();
        if tip_len > 1e-9 {
            let fade_from = tip_len - self.cal.px_from_um(self.config.lumen_fade_um);
            let fade_alpha = self.config.lumen_fade_alpha;
            let faded = sk.faded;
            let alpha = move |t: f64| if faded && t > fade_from { fade_alpha } else { 1.0 };
            draw_segment(&mut buf, w, h, sk.elbow, tip_vec / tip_len, tip_len, shaft_hw * 0.8, tip_hw, true, alpha, level);
        }

        let pixels = buf.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        Frame { width: w, height: h, pixels, t, px_per_mm: self.cal.px_per_mm }
    }
}

/// Convenience wrapper that builds a one-off renderer.
pub fn render(scene: &EyeScene, state: &NeedleState, config: &MicroscopeConfig, t: f64) -> Result<Frame> {
    Ok(Renderer::new(scene, config)?.render(state, t))
}

/// Adds zero-mean Gaussian sensor noise in place.
pub fn add_sensor_noise<R: Rng + ?Sized>(frame: &mut Frame, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    for p in frame.pixels.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *p = (*p as f64 + sigma * n).round().clamp(0.0, 255.0) as u8;
    }
}

/// Anti-aliased segment from `p0` along unit `dir` for `len` pixels, with the
/// half-width interpolated from `hw0` to `hw1`. The far end is square when
/// `butt_end` is set, round otherwise; the near end is always round.
#[allow(clippy::too_many_arguments)]
fn draw_segment(
    buf: &mut [f32],
    w: usize,
    h: usize,
    p0: Vec2,
    dir: Vec2,
    len: f64,
    hw0: f64,
    hw1: f64,
    butt_end: bool,
    alpha: impl Fn(f64) -> f64,
    level: f32,
) {
    let reach = hw0.max(hw1) + 1.0;
    let p1 = p0 + dir * len;
    let ymin = (p0.y.min(p1.y) - reach).floor().max(0.0) as i64;
    let ymax = (p0.y.max(p1.y) + reach).ceil().min(h as f64 - 1.0) as i64;
    for y in ymin..=ymax {
        let yf = y as f64;
        // x-interval where |perp| <= reach and -reach <= along <= len + reach
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        let dy = yf - p0.y;
        for (slope, offset, a, b) in [
            (dir.y, -dy * dir.x, -reach, reach),
            (dir.x, dy * dir.y, -reach, len + reach),
        ] {
            // slope * (x - p0.x) + offset in [a, b]
            if slope.abs() < 1e-12 {
                if offset < a || offset > b {
                    lo = f64::INFINITY;
                }
            } else {
                let (u, v) = ((a - offset) / slope + p0.x, (b - offset) / slope + p0.x);
                lo = lo.max(u.min(v));
                hi = hi.min(u.max(v));
            }
        }
        if lo > hi {
            continue;
        }
        let x0 = lo.floor().max(0.0) as i64;
        let x1 = hi.ceil().min(w as f64 - 1.0) as i64;
        for x in x0..=x1 {
            let q = Vec2::new(x as f64, yf) - p0;
            let along = q.dot(&dir);
            let perp = (q.x * dir.y - q.y * dir.x).abs();
            let frac = (along / len).clamp(0.0, 1.0);
            let hw = hw0 + (hw1 - hw0) * frac;
            let mut cover = if along < 0.0 {
                (hw0 + 0.5 - q.norm()).clamp(0.0, 1.0)
            } else if along > len && !butt_end {
                (hw1 + 0.5 - (q - dir * len).norm()).clamp(0.0, 1.0)
            } else {
                (hw + 0.5 - perp).clamp(0.0, 1.0)
            };
            if butt_end {
                cover *= (0.5 - (along - len)).clamp(0.0, 1.0);
            }
            if cover <= 0.0 {
                continue;
            }
            let a = (cover * alpha(along)) as f32;
            let px = &mut buf[y as usize * w + x as usize];
            *px = *px * (1.0 - a) + level * a;
        }
    }
}

/// Stateful temporal decimator: keeps the earliest frame of each
/// `1 / target_hz` interval, measured from the first frame seen.
#[derive(Debug, Clone)]
pub struct Subsampler {
    target_hz: f64,
    start: Option<f64>,
    last_t: Option<f64>,
    last_bin: Option<i64>,
}

impl Subsampler {
    pub fn new(target_hz: f64) -> Result<Self> {
        if !(target_hz > 0.0) {
            return Err(Error::Stream(format!("target rate must be positive, got {target_hz}")));
        }
        Ok(Self { target_hz, start: None, last_t: None, last_bin: None })
    }

    /// Whether a frame stamped `t` should be kept.
    pub fn accept(&mut self, t: f64) -> Result<bool> {
        if let Some(prev) = self.last_t {
            if t <= prev {
                return Err(Error::Stream(format!("timestamp {t} does not follow {prev}")));
            }
        }
        self.last_t = Some(t);
        let start = *self.start.get_or_insert(t);
        let bin = ((t - start) * self.target_hz + 1e-9).floor() as i64;
        if self.last_bin.is_some_and(|b| b >= bin) {
            return Ok(false);
        }
        self.last_bin = Some(bin);
        Ok(true)
    }
}

/// Decimates a frame stream to `target_hz`, preserving order.
pub fn subsample(frames: Vec<Frame>, target_hz: f64) -> Result<Vec<Frame>> {
    let mut sampler = Subsampler::new(target_hz)?;
    let mut out = Vec::new();
    for f in frames {
        if sampler.accept(f.t)? {
            out.push(f);
        }
    }
    Ok(out)
}

/// One line of an episode recording's `index.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecordingEntry {
    pub index: usize,
    pub t: f64,
    pub file: String,
    pub state: NeedleState,
}

/// Writes frames as PNG files plus an `index.jsonl` with ground-truth states.
pub fn write_recording(dir: &Path, frames: &[(Frame, NeedleState)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = BufWriter::new(File::create(dir.join("index.jsonl"))?);
    for (i, (frame, state)) in frames.iter().enumerate() {
        let file = format!("frame_{i:05}.png");
        frame.write_png(&dir.join(&file))?;
        let entry = RecordingEntry { index: i, t: frame.t, file, state: state.clone() };
        serde_json::to_writer(&mut index, &entry)?;
        index.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_recording_index(dir: &Path) -> Result<Vec<RecordingEntry>> {
    let text = fs::read_to_string(dir.join("index.jsonl"))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
