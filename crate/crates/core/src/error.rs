use thiserror::Error;

/// Errors raised across the simulation, perception, planning and harness layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("direction is not unit length (norm = {0})")]
    NonUnitDirection(f64),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("window out of bounds: {0}")]
    Boundary(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("stream error: {0}")]
    Stream(String),

    #[error("tracking lost (best score {score:.3} below floor {floor:.3})")]
    TrackingLost { score: f64, floor: f64 },

    #[error("model error: {0}")]
    Model(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("puncture detector used before contact was detected")]
    Gating,

    #[error("command rejected: {0}")]
    Rejected(String),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("campaign halted after {completed} trials: {reason}")]
    CampaignHalted { completed: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
