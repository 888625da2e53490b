//! Ground-truth eye physics.
//!
//! The retina is the plane `z = retina_plane_z`; veins are constant-radius
//! tubes lying on it. The needle tip is the controlled point and the shaft is
//! slaved to the scleral entry point, so the remote-center-of-motion holds by
//! construction. Contact is a linear spring on the z-lag between the commanded
//! (robot) tip and the pinned physical tip; the wall gives way once the spring
//! force reaches the vein's puncture threshold, and the tip pops into the lumen.
//!
//! All lengths are micrometres, times are seconds.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Default microscope calibration in pixels per millimetre.
pub const DEFAULT_PX_PER_MM: f64 = 136.33;
/// Needle tip diameter.
pub const TIP_DIAMETER_UM: f64 = 15.0;
/// Nominal elbow bend of the needle.
pub const NOMINAL_ELBOW_DEG: f64 = 45.0;

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub vein_count: usize,
    /// Inclusive range the vein diameters are drawn from.
    pub vein_diameter_um: [f64; 2],
    /// Per-vein wall strength range, in spring units (stiffness x micrometres).
    pub wall_puncture_force: [f64; 2],
    pub contact_stiffness: f64,
    pub pop_distance_um: f64,
    pub retina_plane_z: f64,
    /// Horizontal distance from the optical axis to the scleral entry point.
    pub entry_radius_um: f64,
    /// Height of the entry point above the retina plane.
    pub entry_height_um: f64,
    /// Azimuth range of the entry point, degrees from +x.
    pub entry_azimuth_deg: [f64; 2],
    /// Minimum clearance between the walls of two veins.
    pub vein_clearance_um: f64,
    /// Veins are generated within this half-extent around the optical axis.
    pub vein_half_length_um: f64,
    pub vein_offset_range_um: f64,
    pub px_per_mm: f64,
    pub max_speed_um_s: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            vein_count: 3,
            vein_diameter_um: [60.0, 120.0],
            wall_puncture_force: [70.0, 90.0],
            contact_stiffness: 1.0,
            pop_distance_um: 20.0,
            retina_plane_z: 0.0,
            entry_radius_um: 9000.0,
            entry_height_um: 7000.0,
            entry_azimuth_deg: [155.0, 205.0],
            vein_clearance_um: 250.0,
            vein_half_length_um: 3600.0,
            vein_offset_range_um: 1400.0,
            px_per_mm: DEFAULT_PX_PER_MM,
            max_speed_um_s: 1000.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [dlo, dhi] = self.vein_diameter_um;
        if self.vein_count == 0 {
            return Err(Error::Config("at least one vein is required".into()));
        }
        if !(dlo > 0.0 && dlo <= dhi && dhi <= 500.0) {
            return Err(Error::Config(format!(
                "vein diameter range [{dlo}, {dhi}] must lie within (0, 500] um"
            )));
        }
        let [wlo, whi] = self.wall_puncture_force;
        if !(wlo > 0.0 && wlo <= whi) {
            return Err(Error::Config(format!(
                "wall puncture force range [{wlo}, {whi}] must be positive and ordered"
            )));
        }
        if self.contact_stiffness <= 0.0 || self.pop_distance_um < 0.0 {
            return Err(Error::Config("contact stiffness must be > 0 and pop distance >= 0".into()));
        }
        if self.px_per_mm <= 0.0 {
            return Err(Error::Config("px_per_mm must be positive".into()));
        }
        if self.entry_height_um <= 0.0 || self.entry_radius_um < 0.0 {
            return Err(Error::Config("entry point must sit above the retina".into()));
        }
        if self.entry_azimuth_deg[0] > self.entry_azimuth_deg[1] {
            return Err(Error::Config("entry azimuth range is reversed".into()));
        }
        if self.max_speed_um_s <= 0.0 {
            return Err(Error::Config("max speed must be positive".into()));
        }
        Ok(())
    }
}

/// A retinal vein: a tube of constant radius around a polyline centerline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vein {
    pub centerline: Vec<Vec3>,
    pub radius: f64,
    pub wall_puncture_force: f64,
    /// Distance from the top of the vein wall down to the lumen floor.
    pub lumen_depth: f64,
}

impl Vein {
    /// Horizontal distance from `xy` to the centerline, and the centerline
    /// height at the closest point.
    pub fn closest(&self, xy: Vec2) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for seg in self.centerline.windows(2) {
            let a = seg[0].xy();
            let b = seg[1].xy();
            let ab = b - a;
            let len2 = ab.norm_squared();
            let t = if len2 > 0.0 { ((xy - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let d = (xy - (a + ab * t)).norm();
            if d < best.0 {
                best = (d, seg[0].z + (seg[1].z - seg[0].z) * t);
            }
        }
        best
    }

    /// Height of the tube's upper surface above `xy`, if `xy` lies over the tube.
    pub fn surface_z(&self, xy: Vec2) -> Option<f64> {
        let (d, zc) = self.closest(xy);
        (d < self.radius).then(|| zc + (self.radius * self.radius - d * d).sqrt())
    }

    pub fn arc_length(&self) -> f64 {
        self.centerline.windows(2).map(|s| (s[1] - s[0]).norm()).sum()
    }

    /// Point on the centerline at arc length `s` (clamped to the ends).
    pub fn point_at(&self, s: f64) -> Vec3 {
        let mut remaining = s.max(0.0);
        for seg in self.centerline.windows(2) {
            let len = (seg[1] - seg[0]).norm();
            if remaining <= len && len > 0.0 {
                return seg[0] + (seg[1] - seg[0]) * (remaining / len);
            }
            remaining -= len;
        }
        *self.centerline.last().expect("vein has a centerline")
    }
}

/// Mechanical constants shared by every vein in a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactMechanics {
    pub stiffness: f64,
    pub pop_distance_um: f64,
    pub max_speed_um_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeScene {
    pub entry_point: Vec3,
    pub retina_plane_z: f64,
    pub veins: Vec<Vein>,
    pub texture_seed: u64,
    pub px_per_mm: f64,
    pub mechanics: ContactMechanics,
    pub seed: u64,
}

impl EyeScene {
    pub fn validate(&self) -> Result<()> {
        if self.entry_point.z <= self.retina_plane_z {
            return Err(Error::Config("entry point must be above the retina plane".into()));
        }
        if self.px_per_mm <= 0.0 {
            return Err(Error::Config("px_per_mm must be positive".into()));
        }
        if self.veins.is_empty() {
            return Err(Error::Config("scene has no veins".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Self = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    /// The vein whose upper surface is highest above `xy`.
    pub fn vein_under(&self, xy: Vec2) -> Option<(usize, f64)> {
        self.veins
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.surface_z(xy).map(|z| (i, z)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Builds a randomized eye. Deterministic in `(config, seed)`.
pub fn create_scene(config: &SceneConfig, seed: u64) -> Result<EyeScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let along = Vec2::new(theta.cos(), theta.sin());
    let across = Vec2::new(-theta.sin(), theta.cos());

    let mut veins: Vec<Vein> = Vec::with_capacity(config.vein_count);
    let mut attempts = 0;
    while veins.len() < config.vein_count {
        attempts += 1;
        if attempts > 500 {
            return Err(Error::Config(format!(
                "could not place {} non-intersecting veins; widen the offset range",
                config.vein_count
            )));
        }
        let [dlo, dhi] = config.vein_diameter_um;
        let radius = 0.5 * if dhi > dlo { rng.random_range(dlo..=dhi) } else { dlo };
        let [wlo, whi] = config.wall_puncture_force;
        let wall = if whi > wlo { rng.random_range(wlo..=whi) } else { wlo };
        let offset = rng.random_range(-config.vein_offset_range_um..=config.vein_offset_range_um);
        let amplitude = rng.random_range(30.0..150.0);
        let wavelength = rng.random_range(1800.0..4500.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);

        let zc = config.retina_plane_z + radius;
        let n = (2.0 * config.vein_half_length_um / 40.0).ceil() as usize;
        let centerline: Vec<Vec3> = (0..=n)
            .map(|i| {
                let s = -config.vein_half_length_um + 40.0 * i as f64;
                let lateral = offset + amplitude * (std::f64::consts::TAU * s / wavelength + phase).sin();
                let p = along * s + across * lateral;
                Vec3::new(p.x, p.y, zc)
            })
            .collect();
        let candidate = Vein { centerline, radius, wall_puncture_force: wall, lumen_depth: 2.0 * radius };

        let clear = veins.iter().all(|other| {
            let gap = polyline_gap(&candidate, other);
            gap >= candidate.radius + other.radius + config.vein_clearance_um
        });
        if clear {
            veins.push(candidate);
        }
    }

    let [alo, ahi] = config.entry_azimuth_deg;
    let azimuth = if ahi > alo { rng.random_range(alo..=ahi) } else { alo }.to_radians();
    let entry_point = Vec3::new(
        config.entry_radius_um * azimuth.cos(),
        config.entry_radius_um * azimuth.sin(),
        config.retina_plane_z + config.entry_height_um,
    );

    let scene = EyeScene {
        entry_point,
        retina_plane_z: config.retina_plane_z,
        veins,
        texture_seed: rng.next_u64(),
        px_per_mm: config.px_per_mm,
        mechanics: ContactMechanics {
            stiffness: config.contact_stiffness,
            pop_distance_um: config.pop_distance_um,
            max_speed_um_s: config.max_speed_um_s,
        },
        seed,
    };
    scene.validate()?;
    Ok(scene)
}

fn polyline_gap(a: &Vein, b: &Vein) -> f64 {
    a.centerline
        .iter()
        .map(|p| b.closest(p.xy()).0)
        .fold(f64::INFINITY, f64::min)
}

/// Unit shaft direction from the entry point toward the tip.
pub fn shaft_from_tip(tip: &Vec3, entry: &Vec3) -> Result<Vec3> {
    let d = tip - entry;
    let n = d.norm();
    if n < 1e-9 {
        return Err(Error::DegenerateGeometry("tip coincides with the entry point".into()));
    }
    Ok(d / n)
}

/// Perpendicular distance from `entry` to the line through `tip` along `shaft_dir`.
pub fn rcm_residual(tip: &Vec3, shaft_dir: &Vec3, entry: &Vec3) -> Result<f64> {
    let n = shaft_dir.norm();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NonUnitDirection(n));
    }
    Ok((entry - tip).cross(shaft_dir).norm())
}

/// Linear contact spring.
pub fn contact_spring(penetration_cmd: f64, stiffness: f64) -> Result<f64> {
    if penetration_cmd < 0.0 {
        return Err(Error::Contract(format!("negative penetration {penetration_cmd}")));
    }
    if stiffness <= 0.0 {
        return Err(Error::Contract(format!("non-positive stiffness {stiffness}")));
    }
    Ok(stiffness * penetration_cmd)
}

/// Height of the topmost vein surface under `xy`, if any vein lies beneath it.
pub fn oracle_contact_depth(scene: &EyeScene, xy: Vec2) -> Option<f64> {
    scene.vein_under(xy).map(|(_, z)| z)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseFlags {
    pub in_contact: bool,
    pub punctured: bool,
    pub tissue_damage: bool,
}

/// Needle configuration. `robot` is where the tip would be without any tissue
/// loading; `tip` is where it physically is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleState {
    pub tip: Vec3,
    pub robot: Vec3,
    pub shaft_dir: Vec3,
    pub elbow_angle_deg: f64,
    pub deflection: f64,
    pub flags: PhaseFlags,
    /// Fixed tip offset from the robot point once the tip is inside a lumen.
    pub lumen_offset: Vec3,
    pub contact_vein: Option<usize>,
    /// Set once the needle has been in contact during this episode.
    pub contact_seen: bool,
}

impl NeedleState {
    /// Unloaded needle with the tip at `tip`.
    pub fn at_rest(scene: &EyeScene, tip: Vec3) -> Result<Self> {
        Ok(Self {
            tip,
            robot: tip,
            shaft_dir: shaft_from_tip(&tip, &scene.entry_point)?,
            elbow_angle_deg: NOMINAL_ELBOW_DEG,
            deflection: 0.0,
            flags: PhaseFlags::default(),
            lumen_offset: Vec3::zeros(),
            contact_vein: None,
            contact_seen: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactEvent {
    None,
    Contact,
    Puncture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactInfo {
    pub penetration_cmd: f64,
    pub spring_force: f64,
    pub event: ContactEvent,
    pub pop_displacement: Vec3,
}

impl ContactInfo {
    fn free() -> Self {
        Self { penetration_cmd: 0.0, spring_force: 0.0, event: ContactEvent::None, pop_displacement: Vec3::zeros() }
    }
}

/// Advances the needle by one explicit Euler step of the commanded tip velocity.
///
/// Driving the tip below the retina plane sets `flags.tissue_damage`; it is an
/// episode failure, not an error.
pub fn step(scene: &EyeScene, state: &NeedleState, control: &Vec3, dt: f64) -> Result<(NeedleState, ContactInfo)> {
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("dt must be positive, got {dt}")));
    }
    let speed = control.norm();
    if speed > scene.mechanics.max_speed_um_s * (1.0 + 1e-9) {
        return Err(Error::Contract(format!(
            "commanded speed {speed:.3} um/s exceeds the {:.3} um/s limit",
            scene.mechanics.max_speed_um_s
        )));
    }

    let mech = &scene.mechanics;
    let mut next = state.clone();
    let mut info = ContactInfo::free();
    next.robot = state.robot + control * dt;

    if state.flags.punctured {
        next.tip = next.robot + state.lumen_offset;
    } else if state.flags.in_contact {
        let pinned = state.tip;
        let lag = pinned.z - next.robot.z;
        if lag <= 0.0 {
            next.flags.in_contact = false;
            next.deflection = 0.0;
            next.tip = next.robot;
            next.contact_vein = None;
        } else {
            next.deflection = lag;
            info.penetration_cmd = lag;
            info.spring_force = contact_spring(lag, mech.stiffness)?;
            let vein = state.contact_vein.expect("contact vein recorded while in contact");
            if info.spring_force >= scene.veins[vein].wall_puncture_force {
                puncture(scene, &mut next, &mut info, pinned)?;
            }
        }
    } else if let Some((vein, surface)) = scene.vein_under(next.robot.xy()) {
        if next.robot.z <= surface {
            let pinned = Vec3::new(next.robot.x, next.robot.y, surface);
            let lag = surface - next.robot.z;
            next.tip = pinned;
            next.deflection = lag;
            next.flags.in_contact = true;
            next.contact_seen = true;
            next.contact_vein = Some(vein);
            info.event = ContactEvent::Contact;
            info.penetration_cmd = lag;
            info.spring_force = contact_spring(lag, mech.stiffness)?;
            if info.spring_force >= scene.veins[vein].wall_puncture_force {
                puncture(scene, &mut next, &mut info, pinned)?;
            }
        } else {
            next.tip = next.robot;
        }
    } else {
        next.tip = next.robot;
    }

    if next.tip.z < scene.retina_plane_z {
        next.flags.tissue_damage = true;
    }
    next.shaft_dir = shaft_from_tip(&next.tip, &scene.entry_point)?;
    Ok((next, info))
}

fn puncture(scene: &EyeScene, next: &mut NeedleState, info: &mut ContactInfo, pinned: Vec3) -> Result<()> {
    let axis = shaft_from_tip(&pinned, &scene.entry_point)?;
    let pop = axis * scene.mechanics.pop_distance_um;
    next.tip = pinned + pop;
    next.lumen_offset = next.tip - next.robot;
    next.deflection = 0.0;
    next.flags.in_contact = false;
    next.flags.punctured = true;
    info.event = ContactEvent::Puncture;
    info.pop_displacement = pop;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat_scene() -> EyeScene {
        let radius = 40.0;
        EyeScene {
            entry_point: Vec3::new(-9000.0, 0.0, 7000.0),
            retina_plane_z: 0.0,
            veins: vec![Vein {
                centerline: vec![Vec3::new(-3000.0, 0.0, radius), Vec3::new(3000.0, 0.0, radius)],
                radius,
                wall_puncture_force: 60.0,
                lumen_depth: 2.0 * radius,
            }],
            texture_seed: 1,
            px_per_mm: DEFAULT_PX_PER_MM,
            mechanics: ContactMechanics { stiffness: 1.0, pop_distance_um: 20.0, max_speed_um_s: 1000.0 },
            seed: 0,
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = create_scene(&SceneConfig::default(), 7).unwrap();
        let b = create_scene(&SceneConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, create_scene(&SceneConfig::default(), 8).unwrap());
    }

    #[test]
    fn default_vein_diameters_in_range() {
        for seed in 0..20 {
            let scene = create_scene(&SceneConfig::default(), seed).unwrap();
            for v in &scene.veins {
                assert!((60.0..=120.0).contains(&(2.0 * v.radius)), "diameter {}", 2.0 * v.radius);
                assert!(v.wall_puncture_force > 0.0);
            }
        }
    }

    #[test]
    fn veins_do_not_intersect() {
        let cfg = SceneConfig::default();
        for seed in 0..10 {
            let scene = create_scene(&cfg, seed).unwrap();
            for (i, a) in scene.veins.iter().enumerate() {
                for b in &scene.veins[i + 1..] {
                    assert!(polyline_gap(a, b) >= a.radius + b.radius + cfg.vein_clearance_um);
                }
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let zero = SceneConfig { vein_count: 0, ..Default::default() };
        assert!(matches!(create_scene(&zero, 1), Err(Error::Config(_))));
        let wide = SceneConfig { vein_diameter_um: [60.0, 600.0], ..Default::default() };
        assert!(matches!(create_scene(&wide, 1), Err(Error::Config(_))));
        let flipped = SceneConfig { vein_diameter_um: [0.0, 100.0], ..Default::default() };
        assert!(create_scene(&flipped, 1).is_err());
    }

    #[test]
    fn scene_json_round_trip() {
        let scene = create_scene(&SceneConfig::default(), 3).unwrap();
        let back = EyeScene::from_json(&scene.to_json().unwrap()).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn shaft_examples() {
        let d = shaft_from_tip(&Vec3::new(0.0, 0.0, 0.0), &Vec3::new(0.0, 0.0, 10000.0)).unwrap();
        assert_relative_eq!(d, Vec3::new(0.0, 0.0, -1.0));
        let d = shaft_from_tip(&Vec3::new(100.0, 0.0, 0.0), &Vec3::new(100.0, 0.0, 5000.0)).unwrap();
        assert_relative_eq!(d, Vec3::new(0.0, 0.0, -1.0));
        let d = shaft_from_tip(&Vec3::new(3.0, 4.0, 0.0), &Vec3::zeros()).unwrap();
        assert_relative_eq!(d, Vec3::new(0.6, 0.8, 0.0), epsilon = 1e-15);
        assert!(matches!(
            shaft_from_tip(&Vec3::new(1.0, 2.0, 3.0), &Vec3::new(1.0, 2.0, 3.0)),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn rcm_residual_examples() {
        let entry = Vec3::new(0.0, 0.0, 500.0);
        let tip = Vec3::new(0.0, 0.0, 0.0);
        assert_eq!(rcm_residual(&tip, &Vec3::new(0.0, 0.0, 1.0), &entry).unwrap(), 0.0);
        let r = rcm_residual(&tip, &Vec3::new(0.0, 0.0, 1.0), &Vec3::new(5.0, 0.0, 100.0)).unwrap();
        assert_relative_eq!(r, 5.0, epsilon = 1e-12);
        // sliding the tip along the line leaves the residual unchanged
        let dir = Vec3::new(1.0, 2.0, -2.0) / 3.0;
        let e = Vec3::new(7.0, -3.0, 40.0);
        let r0 = rcm_residual(&tip, &dir, &e).unwrap();
        let r1 = rcm_residual(&(tip + dir * 123.4), &dir, &e).unwrap();
        assert_relative_eq!(r0, r1, epsilon = 1e-10);
        assert!(matches!(rcm_residual(&tip, &Vec3::new(0.0, 0.0, 2.0), &e), Err(Error::NonUnitDirection(_))));
    }

    #[test]
    fn spring_examples() {
        assert_eq!(contact_spring(0.0, 0.7).unwrap(), 0.0);
        assert_relative_eq!(contact_spring(10.0, 0.5).unwrap(), 5.0);
        assert_relative_eq!(contact_spring(20.0, 0.5).unwrap(), 2.0 * contact_spring(10.0, 0.5).unwrap());
        assert!(contact_spring(-1.0, 0.5).is_err());
    }

    #[test]
    fn oracle_depth_examples() {
        let scene = flat_scene();
        assert_relative_eq!(oracle_contact_depth(&scene, Vec2::new(0.0, 0.0)).unwrap(), 80.0);
        assert!(oracle_contact_depth(&scene, Vec2::new(0.0, 500.0)).is_none());
        let up = oracle_contact_depth(&scene, Vec2::new(10.0, 25.0)).unwrap();
        let down = oracle_contact_depth(&scene, Vec2::new(10.0, -25.0)).unwrap();
        assert_relative_eq!(up, down);
        assert_relative_eq!(up, 40.0 + (40.0f64.powi(2) - 25.0f64.powi(2)).sqrt());
    }

    #[test]
    fn zero_control_is_a_fixed_point() {
        let scene = flat_scene();
        let s = NeedleState::at_rest(&scene, Vec3::new(0.0, 0.0, 500.0)).unwrap();
        let (n, info) = step(&scene, &s, &Vec3::zeros(), 1.0 / 30.0).unwrap();
        assert_eq!(n, s);
        assert_eq!(info.event, ContactEvent::None);
    }

    #[test]
    fn free_space_euler_step() {
        let scene = flat_scene();
        let s = NeedleState::at_rest(&scene, Vec3::new(0.0, 0.0, 500.0)).unwrap();
        let (n, _) = step(&scene, &s, &Vec3::new(0.0, 0.0, -100.0), 0.1).unwrap();
        assert_relative_eq!(n.tip.z, 490.0, epsilon = 1e-12);
        assert_relative_eq!(n.shaft_dir, shaft_from_tip(&n.tip, &scene.entry_point).unwrap());
    }

    #[test]
    fn overspeed_is_rejected() {
        let scene = flat_scene();
        let s = NeedleState::at_rest(&scene, Vec3::new(0.0, 0.0, 500.0)).unwrap();
        assert!(step(&scene, &s, &Vec3::new(0.0, 0.0, -2000.0), 0.1).is_err());
        assert!(step(&scene, &s, &Vec3::zeros(), 0.0).is_err());
    }

    /// Scripted lowering: the spring force is the z-lag past the surface, and
    /// the pop fires on the first step where that force reaches the wall strength.
    #[test]
    fn scripted_contact_then_puncture() {
        let scene = flat_scene();
        let mut s = NeedleState::at_rest(&scene, Vec3::new(0.0, 0.0, 100.0)).unwrap();
        let u = Vec3::new(0.0, 0.0, -300.0);
        let dt = 0.1; // 30 um per step
        let surface = 80.0;
        let mut events = Vec::new();
        for _ in 0..6 {
            let (n, info) = step(&scene, &s, &u, dt).unwrap();
            events.push(info.event);
            let expected_lag = (surface - n.robot.z).max(0.0);
            match info.event {
                ContactEvent::Puncture => {
                    assert!(expected_lag >= 60.0);
                    assert!(s.deflection < 60.0);
                    assert_relative_eq!(info.spring_force, expected_lag, epsilon = 1e-9);
                    assert_relative_eq!(info.pop_displacement.norm(), 20.0, epsilon = 1e-9);
                    assert_eq!(n.deflection, 0.0);
                    assert!(n.flags.punctured && n.contact_seen);
                    s = n;
                    break;
                }
                _ => {
                    if n.flags.in_contact {
                        assert_relative_eq!(n.deflection, expected_lag, epsilon = 1e-9);
                        assert_relative_eq!(n.tip.z, surface);
                    }
                }
            }
            s = n;
        }
        // contact at robot z = 70 (lag 10), 40 (lag 40), pop at 10 (lag 70)
        assert_eq!(events, vec![ContactEvent::Contact, ContactEvent::None, ContactEvent::Puncture]);
        assert!(s.flags.punctured);
        // after the pop, the tip rides with the robot
        let (n, _) = step(&scene, &s, &Vec3::new(0.0, 0.0, 100.0), 0.1).unwrap();
        assert_relative_eq!(n.tip - s.tip, Vec3::new(0.0, 0.0, 10.0), epsilon = 1e-9);
    }

    #[test]
    fn tissue_damage_flagged_not_raised() {
        let scene = flat_scene();
        let s = NeedleState::at_rest(&scene, Vec3::new(0.0, 800.0, 5.0)).unwrap();
        let (n, _) = step(&scene, &s, &Vec3::new(0.0, 0.0, -300.0), 0.1).unwrap();
        assert!(n.flags.tissue_damage);
    }

    #[test]
    fn lifting_off_releases_contact() {
        let scene = flat_scene();
        let s = NeedleState::at_rest(&scene, Vec3::new(0.0, 0.0, 85.0)).unwrap();
        let (n, _) = step(&scene, &s, &Vec3::new(0.0, 0.0, -100.0), 0.1).unwrap();
        assert!(n.flags.in_contact);
        let (n, _) = step(&scene, &n, &Vec3::new(0.0, 0.0, 200.0), 0.1).unwrap();
        assert!(!n.flags.in_contact);
        assert_eq!(n.deflection, 0.0);
        assert_eq!(n.tip, n.robot);
    }
}
