//! Top-level sandbox configuration, loaded from TOML or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autonomy::AutonomyConfig;
use crate::error::{Error, Result};
use crate::microscope::MicroscopeConfig;
use crate::scene::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    /// Starting tip height above the retina.
    pub start_height_um: f64,
    /// Range of horizontal start distances from the goal.
    pub start_distance_um: [f64; 2],
    /// Goals and starts keep this distance from the image border.
    pub fov_margin_um: f64,
    /// Goals keep this arc length from either end of their vein.
    pub goal_end_clearance_um: f64,
    /// Goals keep this distance from the wall of any other vein.
    pub goal_vein_clearance_um: f64,
    pub xy_error_target_um: f64,
    pub duration_target_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            start_height_um: 1000.0,
            start_distance_um: [400.0, 1200.0],
            fov_margin_um: 300.0,
            goal_end_clearance_um: 200.0,
            goal_vein_clearance_um: 200.0,
            xy_error_target_um: 24.0,
            duration_target_s: 35.0,
            model_path: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub scene: SceneConfig,
    pub microscope: MicroscopeConfig,
    pub autonomy: AutonomyConfig,
    pub harness: HarnessConfig,
}

impl SandboxConfig {
    /// Reads `.toml` or `.json`, by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml(&text)?,
            Some("json") => serde_json::from_str(&text)?,
            other => return Err(Error::Config(format!("unsupported config extension {other:?}; use .toml or .json"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.microscope.validate()?;
        self.autonomy.validate()?;
        let h = &self.harness;
        if !(h.start_height_um > 0.0 && h.start_distance_um[0] >= 0.0 && h.start_distance_um[0] <= h.start_distance_um[1]) {
            return Err(Error::Config("start height must be positive and the distance range ordered".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn digest(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}
