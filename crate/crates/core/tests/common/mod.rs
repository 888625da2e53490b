//! Metric recomputation straight from the JSONL text, without the library's
//! log types.

#![allow(dead_code)]

use std::path::Path;

use serde_json::Value;

pub struct Recomputed {
    pub success: bool,
    pub xy_error_um: Option<f64>,
    pub duration_s: Option<f64>,
    pub contact_delay_um: Option<f64>,
    pub puncture_delay_um: Option<f64>,
    pub path_length_um: f64,
    pub frames: usize,
}

fn vec(v: &Value) -> Vec<f64> {
    v.as_array().expect("array").iter().map(|x| x.as_f64().expect("number")).collect()
}

fn has_event(frame: &Value, kind: &str) -> bool {
    frame["events"].as_array().unwrap().iter().any(|e| e["kind"] == kind)
}

pub fn recompute(path: &Path) -> Recomputed {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str::<Value>(l).unwrap());
    let header = lines.next().unwrap();
    assert_eq!(header["type"], "header");
    let frames: Vec<Value> = lines.collect();
    assert!(frames.iter().all(|f| f["type"] == "frame"));

    let last = frames.last().unwrap();
    let damage = frames.iter().any(|f| f["flags"]["tissue_damage"] == true);
    let success = last["state"] == "Done" && !damage;

    let contact_at = frames.iter().position(|f| has_event(f, "contact_detected"));
    let puncture_at = frames.iter().position(|f| has_event(f, "puncture_detected"));
    let xy_error_um = match (contact_at, header["goal_px"].as_array()) {
        (Some(k), Some(_)) => {
            let goal = vec(&header["goal_px"]);
            let origin = vec(&header["calibration"]["origin_px"]);
            let scale = 1000.0 / header["calibration"]["px_per_mm"].as_f64().unwrap();
            let gx = (goal[0] - origin[0]) * scale;
            let gy = (goal[1] - origin[1]) * scale;
            let tip = vec(&frames[k]["tip_gt"]);
            Some(((tip[0] - gx).powi(2) + (tip[1] - gy).powi(2)).sqrt())
        }
        _ => None,
    };
    let duration_s = frames.iter().find(|f| f["state"] == "Hold").map(|f| f["t"].as_f64().unwrap());
    let z = |k: usize| vec(&frames[k]["robot"])[2];
    let first_contact = frames.iter().position(|f| f["flags"]["in_contact"] == true || f["flags"]["punctured"] == true);
    let first_puncture = frames.iter().position(|f| f["flags"]["punctured"] == true);
    let contact_delay_um = first_contact.zip(contact_at).map(|(c, d)| z(c) - z(d));
    let puncture_delay_um = first_puncture.zip(puncture_at).map(|(c, d)| z(c) - z(d));
    let path_length_um = frames
        .windows(2)
        .map(|w| {
            let (a, b) = (vec(&w[0]["robot"]), vec(&w[1]["robot"]));
            ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt()
        })
        .sum();
    Recomputed { success, xy_error_um, duration_s, contact_delay_um, puncture_delay_um, path_length_um, frames: frames.len() }
}

pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

/// Compares recomputed metrics with the reported ones at `tol`.
pub fn agrees(r: &Recomputed, m: &cannula_core::harness::TrialMetrics, tol: f64) -> bool {
    r.success == m.success
        && r.frames == m.frames
        && close(r.xy_error_um, m.xy_error_um, tol)
        && close(r.duration_s, m.duration_s, tol)
        && close(r.contact_delay_um, m.contact_delay_um, tol)
        && close(r.puncture_delay_um, m.puncture_delay_um, tol)
        && (r.path_length_um - m.path_length_um).abs() <= tol
}
