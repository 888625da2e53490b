//! SVG figures and a velocity table for one episode.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;

use super::trial::TrialMetrics;
use crate::autonomy::EpisodeLog;
use crate::error::{Error, Result};
use crate::scene::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VelocitySample {
    /// Midpoint of the control period.
    pub t: f64,
    pub speed_um_s: f64,
}

/// Robot speed over each control period, stamped at the period midpoint.
pub fn velocity_profile(log: &EpisodeLog) -> Vec<VelocitySample> {
    let dt = log.header.dt;
    log.frames
        .windows(2)
        .map(|w| VelocitySample {
            t: w[0].t + 0.5 * dt,
            speed_um_s: (Vec3::from(w[1].robot) - Vec3::from(w[0].robot)).norm() / dt,
        })
        .collect()
}

fn plot_error<E: std::fmt::Debug>(e: E) -> Error {
    Error::Image(format!("plot: {e:?}"))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Label, colour and points of one line.
type Series<'a> = (&'a str, RGBColor, Vec<(f64, f64)>);

fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.2.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.2.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_error)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(plot_error)?;
    for (label, color, points) in series {
        let c = *color;
        chart
            .draw_series(LineSeries::new(points.iter().copied(), c))
            .map_err(plot_error)?
            .label(*label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_error)?;
    root.present().map_err(plot_error)?;
    Ok(())
}

/// Writes `trajectory_xy.svg`, `height.svg`, `perception.svg`, `speed.svg`
/// and `velocity_profile.csv` into `dir`.
pub fn emit_plots(log: &EpisodeLog, dir: &Path) -> Result<Vec<PathBuf>> {
    if log.frames.is_empty() {
        return Err(Error::Contract("cannot plot an empty episode".into()));
    }
    std::fs::create_dir_all(dir)?;
    let f = &log.frames;
    let mut written = Vec::new();

    let p = dir.join("trajectory_xy.svg");
    let mut series = vec![
        ("tip", BLUE, f.iter().map(|r| (r.tip_gt[0], r.tip_gt[1])).collect::<Vec<_>>()),
        ("robot", RED, f.iter().map(|r| (r.robot[0], r.robot[1])).collect()),
    ];
    if let Some(px) = log.header.goal_px {
        let g = log.header.calibration.unproject(px.into());
        series.push(("goal", GREEN, vec![(g.x - 5.0, g.y), (g.x + 5.0, g.y), (g.x, g.y), (g.x, g.y - 5.0), (g.x, g.y + 5.0)]));
    }
    line_chart(&p, "Tip trajectory (top view)", "x [um]", "y [um]", &series)?;
    written.push(p);

    let p = dir.join("height.svg");
    line_chart(
        &p,
        "Height",
        "t [s]",
        "z [um]",
        &[
            ("tip z", BLUE, f.iter().map(|r| (r.t, r.tip_gt[2])).collect()),
            ("robot z", RED, f.iter().map(|r| (r.t, r.robot[2])).collect()),
        ],
    )?;
    written.push(p);

    let p = dir.join("perception.svg");
    line_chart(
        &p,
        "Perception signals",
        "t [s]",
        "value",
        &[
            ("NCC percent change f", BLUE, f.iter().filter_map(|r| r.f.map(|v| (r.t, v))).collect()),
            ("puncture probability", RED, f.iter().filter_map(|r| r.y_hat.map(|v| (r.t, v))).collect()),
        ],
    )?;
    written.push(p);

    let profile = velocity_profile(log);
    let p = dir.join("speed.svg");
    line_chart(&p, "Robot speed", "t [s]", "speed [um/s]", &[("speed", BLUE, profile.iter().map(|s| (s.t, s.speed_um_s)).collect())])?;
    written.push(p);

    let p = dir.join("velocity_profile.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for s in &profile {
        w.serialize(s).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    written.push(p);
    Ok(written)
}

/// Contact and puncture delay histograms over a campaign, side by side.
pub fn emit_delay_histograms(trials: &[TrialMetrics], path: &Path, bin_um: f64) -> Result<()> {
    if trials.is_empty() {
        return Err(Error::Contract("no trials to plot".into()));
    }
    if !(bin_um > 0.0) {
        return Err(Error::Config(format!("histogram bin width must be positive, got {bin_um}")));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let root = SVGBackend::new(path, (1000, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let panels = root.split_evenly((1, 2));
    let sets: [(&str, Vec<f64>); 2] = [
        ("Contact delay", trials.iter().filter_map(|t| t.contact_delay_um).collect()),
        ("Puncture delay", trials.iter().filter_map(|t| t.puncture_delay_um).collect()),
    ];
    for (area, (title, values)) in panels.iter().zip(&sets) {
        let hi = values.iter().copied().fold(0.0, f64::max);
        let bins = ((hi / bin_um).floor() as usize + 1).max(1);
        let mut counts = vec![0usize; bins];
        for v in values {
            counts[((v.max(0.0) / bin_um).floor() as usize).min(bins - 1)] += 1;
        }
        let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let mut chart = ChartBuilder::on(area)
            .caption(format!("{title} (n = {})", values.len()), ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..bins as f64 * bin_um, 0.0..top * 1.1)
            .map_err(plot_error)?;
        chart.configure_mesh().x_desc("delay [um]").y_desc("trials").draw().map_err(plot_error)?;
        chart
            .draw_series(counts.iter().enumerate().map(|(i, &c)| {
                let x0 = i as f64 * bin_um;
                Rectangle::new([(x0, 0.0), (x0 + bin_um, c as f64)], BLUE.mix(0.6).filled())
            }))
            .map_err(plot_error)?;
    }
    root.present().map_err(plot_error)?;
    Ok(())
}
