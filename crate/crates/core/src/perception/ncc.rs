//! Zero-mean normalized cross-correlation template matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microscope::Frame;
use crate::scene::Vec2;

pub const MIN_TEMPLATE_SIDE: usize = 8;

/// A grayscale patch cut from a frame, with the needle tip's location inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub patch: Vec<u8>,
    pub width: usize,
    pub height: usize,
    /// Top-left corner of the patch in the source frame.
    pub origin: [i64; 2],
    /// Tip position relative to the patch's top-left pixel.
    pub anchor_px: [f64; 2],
    pub t0: f64,
}

impl Template {
    pub fn anchor(&self) -> Vec2 {
        Vec2::new(self.anchor_px[0], self.anchor_px[1])
    }
}

/// Cuts a `size[0] x size[1]` patch centred on `tip_px`.
pub fn acquire_template(frame: &Frame, tip_px: Vec2, size: [usize; 2]) -> Result<Template> {
    let [w, h] = size;
    if w < MIN_TEMPLATE_SIDE || h < MIN_TEMPLATE_SIDE {
        return Err(Error::Contract(format!("template {w}x{h} is smaller than {MIN_TEMPLATE_SIDE} px")));
    }
    let x0 = tip_px.x.round() as i64 - (w / 2) as i64;
    let y0 = tip_px.y.round() as i64 - (h / 2) as i64;
    let patch = frame.crop(x0, y0, w, h)?;
    Ok(Template {
        patch,
        width: w,
        height: h,
        origin: [x0, y0],
        anchor_px: [tip_px.x - x0 as f64, tip_px.y - y0 as f64],
        t0: frame.t,
    })
}

/// NCC scores over a rectangle of template offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NccResult {
    pub heat_map: Vec<f64>,
    pub map_width: usize,
    pub map_height: usize,
    /// Frame offset (template top-left) of `heat_map[0]`.
    pub map_origin: [i64; 2],
    pub max_score: f64,
    /// Frame offset of the best match.
    pub max_loc: [i64; 2],
}

impl NccResult {
    pub fn at(&self, x: i64, y: i64) -> Option<f64> {
        let (i, j) = (x - self.map_origin[0], y - self.map_origin[1]);
        if i < 0 || j < 0 || i as usize >= self.map_width || j as usize >= self.map_height {
            return None;
        }
        Some(self.heat_map[j as usize * self.map_width + i as usize])
    }

    pub fn min_score(&self) -> f64 {
        self.heat_map.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Best-match offset refined with a parabola through each axis' neighbours.
    pub fn subpixel_max(&self) -> Vec2 {
        let [x, y] = self.max_loc;
        let c = self.max_score;
        let refine = |lo: Option<f64>, hi: Option<f64>| match (lo, hi) {
            (Some(l), Some(r)) => {
                let denom = l - 2.0 * c + r;
                if denom < -1e-12 {
                    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        Vec2::new(
            x as f64 + refine(self.at(x - 1, y), self.at(x + 1, y)),
            y as f64 + refine(self.at(x, y - 1), self.at(x, y + 1)),
        )
    }
}

/// Full-frame NCC heat map of size `(W - w + 1) x (H - h + 1)`.
pub fn ncc_map(frame: &Frame, template: &Template) -> Result<NccResult> {
    if template.width > frame.width || template.height > frame.height {
        return Err(Error::Contract("template larger than frame".into()));
    }
    ncc_map_region(
        frame,
        template,
        [0, (frame.width - template.width) as i64],
        [0, (frame.height - template.height) as i64],
    )
}

/// NCC heat map over template offsets `x_range` x `y_range` (inclusive),
/// clipped to offsets where the template fits inside the frame.
///
/// Windows with zero intensity variance score 0.
pub fn ncc_map_region(frame: &Frame, template: &Template, x_range: [i64; 2], y_range: [i64; 2]) -> Result<NccResult> {
    let (tw, th) = (template.width, template.height);
    if tw > frame.width || th > frame.height {
        return Err(Error::Contract("template larger than frame".into()));
    }
    let x0 = x_range[0].max(0);
    let x1 = x_range[1].min((frame.width - tw) as i64);
    let y0 = y_range[0].max(0);
    let y1 = y_range[1].min((frame.height - th) as i64);
    if x0 > x1 || y0 > y1 {
        return Err(Error::Boundary(format!("search region {x_range:?} x {y_range:?} lies outside the frame")));
    }

    let n = (tw * th) as f64;
    let mean_t = template.patch.iter().map(|&v| v as f64).sum::<f64>() / n;
    let centered: Vec<f64> = template.patch.iter().map(|&v| v as f64 - mean_t).collect();
    let norm_t = centered.iter().map(|v| v * v).sum::<f64>().sqrt();

    let (mw, mh) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
    let mut heat = vec![0.0; mw * mh];
    let mut best = (f64::NEG_INFINITY, [x0, y0]);
    let fw = frame.width;
    for j in 0..mh {
        for i in 0..mw {
            let (ox, oy) = (x0 as usize + i, y0 as usize + j);
            let (mut s, mut s2, mut cross) = (0u64, 0u64, 0.0f64);
            for ty in 0..th {
                let row = &frame.pixels[(oy + ty) * fw + ox..(oy + ty) * fw + ox + tw];
                let trow = &centered[ty * tw..(ty + 1) * tw];
                for (&p, &t) in row.iter().zip(trow) {
                    let p64 = p as u64;
                    s += p64;
                    s2 += p64 * p64;
                    cross += t * p as f64;
                }
            }
            let var_sum = s2 as f64 - (s as f64) * (s as f64) / n;
            let score = if norm_t <= 1e-12 || var_sum <= 1e-9 {
                0.0
            } else {
                (cross / (norm_t * var_sum.sqrt())).clamp(-1.0, 1.0)
            };
            heat[j * mw + i] = score;
            if score > best.0 {
                best = (score, [ox as i64, oy as i64]);
            }
        }
    }
    Ok(NccResult { heat_map: heat, map_width: mw, map_height: mh, map_origin: [x0, y0], max_score: best.0, max_loc: best.1 })
}
